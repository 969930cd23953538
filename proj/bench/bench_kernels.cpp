#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "vqreg/kernels.hpp"
#include "vqreg/reference.hpp"

using namespace vqreg;

namespace {

std::vector<float> random_vec(size_t n, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    std::vector<float> v(n);
    for (float& x : v) x = u(rng);
    return v;
}

kernels::ConvShape conv_shape(const benchmark::State& st)
{
    kernels::ConvShape s;
    s.in_channels = st.range(1);
    s.out_channels = st.range(1);
    s.kernel = 3;
    s.stride = 1;
    const int64_t n = st.range(0);
    s.in_dims = {n, n, n};
    return s;
}

struct ConvData {
    kernels::ConvShape s;
    std::vector<float> in, w, b, out, g, gin, gw, gb;
    explicit ConvData(const kernels::ConvShape& shape) : s(shape)
    {
        in = random_vec(size_t(s.in_channels * s.in_dims.voxels()), 1);
        w = random_vec(size_t(s.weight_count()), 2);
        b = random_vec(size_t(s.out_channels), 3);
        out.resize(size_t(s.out_channels * s.out_dims().voxels()));
        g = random_vec(out.size(), 4);
        gin.resize(in.size());
        gw.resize(w.size());
        gb.resize(b.size());
    }
};

void set_voxels(benchmark::State& st, const kernels::ConvShape& s)
{
    st.SetItemsProcessed(int64_t(st.iterations()) * s.out_dims().voxels());
}

void BM_conv_forward(benchmark::State& st)
{
    ConvData d(conv_shape(st));
    for (auto _ : st) {
        kernels::conv3d_forward(d.s, d.in.data(), d.w.data(), d.b.data(), d.out.data());
        benchmark::DoNotOptimize(d.out.data());
    }
    set_voxels(st, d.s);
}

void BM_conv_forward_ref(benchmark::State& st)
{
    ConvData d(conv_shape(st));
    for (auto _ : st) {
        reference::conv3d_forward(d.s, d.in.data(), d.w.data(), d.b.data(), d.out.data());
        benchmark::DoNotOptimize(d.out.data());
    }
    set_voxels(st, d.s);
}

void BM_conv_backward(benchmark::State& st)
{
    ConvData d(conv_shape(st));
    for (auto _ : st) {
        kernels::conv3d_backward(d.s, d.in.data(), d.w.data(), d.g.data(), d.gin.data(), d.gw.data(), d.gb.data());
        benchmark::DoNotOptimize(d.gin.data());
    }
    set_voxels(st, d.s);
}

void BM_conv_backward_ref(benchmark::State& st)
{
    ConvData d(conv_shape(st));
    for (auto _ : st) {
        reference::conv3d_backward(d.s, d.in.data(), d.w.data(), d.g.data(), d.gin.data(), d.gw.data(), d.gb.data());
        benchmark::DoNotOptimize(d.gin.data());
    }
    set_voxels(st, d.s);
}

struct ResampleData {
    Dims d;
    std::vector<float> src, ddf, out;
    explicit ResampleData(int64_t n) : d{n, n, n}
    {
        src = random_vec(size_t(d.voxels()), 5);
        ddf = random_vec(size_t(3 * d.voxels()), 6);
        for (float& x : ddf) x *= 3.f;
        out.resize(src.size());
    }
};

void BM_resample(benchmark::State& st)
{
    ResampleData r(st.range(0));
    for (auto _ : st) {
        kernels::resample_forward(1, r.d, r.src.data(), r.ddf.data(), r.out.data());
        benchmark::DoNotOptimize(r.out.data());
    }
    st.SetItemsProcessed(int64_t(st.iterations()) * r.d.voxels());
}

void BM_resample_ref(benchmark::State& st)
{
    ResampleData r(st.range(0));
    for (auto _ : st) {
        reference::resample_forward(1, r.d, r.src.data(), r.ddf.data(), r.out.data());
        benchmark::DoNotOptimize(r.out.data());
    }
    st.SetItemsProcessed(int64_t(st.iterations()) * r.d.voxels());
}

}  // namespace

BENCHMARK(BM_conv_forward)->Args({16, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_forward_ref)->Args({16, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward)->Args({16, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_ref)->Args({16, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_resample)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_resample_ref)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
