#include "vqreg/experiments.hpp"

#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>

#include "vqreg/config.hpp"
#include "vqreg/volume_io.hpp"

namespace vqreg {

namespace fs = std::filesystem;

std::string Arm::dir_name() const
{
    std::string d = quantizers.label();
    if (quantizers.collaborative && !kmeans_init) d += "_random_init";
    if (dict_size > 0) d += "_K" + std::to_string(dict_size);
    return d;
}

std::vector<Arm> ablation_arms()
{
    return {
        {"none", {false, false, false}, false, 0},
        {"v", {true, false, false}, false, 0},
        {"v+h", {true, true, false}, false, 0},
        {"v+c", {true, false, true}, true, 0},
        {"v+h+c", {true, true, true}, true, 0},
        {"v+h+c w/o pretrain", {true, true, true}, false, 0},
    };
}

std::vector<Arm> dict_size_arms(const std::vector<int64_t>& sizes)
{
    std::vector<Arm> out;
    for (int64_t k : sizes) {
        if (k < 1) throw Error("dictionary sizes must be positive");
        out.push_back({"K=" + std::to_string(k), QuantizerSet::all(), true, k});
    }
    return out;
}

namespace {

std::string read_text(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// The bootstrap depends on the data, the encoder and the bootstrap settings only. The rest is
// normalized so that every arm of an experiment shares one cache entry per seed.
std::string bootstrap_key(const TrainConfig& cfg, uint64_t seed)
{
    TrainConfig k = cfg;
    k.seed = seed;
    k.seeds = {seed};
    k.network.enabled = QuantizerSet::all();
    k.network.K_v = k.network.K_h = k.network.K_c = 0;
    k.loss = LossWeights{};
    k.optim = OptimConfig{};
    k.train_eval_pairs = 0;
    k.init_collaborative.clear();
    return k.echo();
}

void write_run_summary(const fs::path& run_dir, const TrainResult& r)
{
    ConfigDoc doc;
    doc.set("result", "best_epoch", std::to_string(r.best_epoch));
    doc.set("result", "best_val_dsc", format_real(r.best_val_dsc));
    doc.set("result", "unregistered_val_dsc", format_real(r.unregistered_val_dsc));
    doc.set("result", "seconds", format_real(r.seconds));
    std::ofstream out(run_dir / "result.ini");
    out << doc.dump();
}

// A run counts as finished when its summary exists and it was trained with the same config.
std::optional<TrainResult> finished_run(const fs::path& run_dir, const std::string& echo)
{
    const fs::path summary = run_dir / "result.ini", cfg = run_dir / "config.ini", best = run_dir / "best.ckpt";
    if (!fs::exists(summary) || !fs::exists(cfg) || !fs::exists(best)) return std::nullopt;
    if (read_text(cfg) != echo) return std::nullopt;
    const ConfigDoc doc = ConfigDoc::load(summary);
    const KeyValues* kv = doc.section("result");
    if (kv == nullptr) return std::nullopt;
    TrainResult r;
    for (const auto& [k, v] : *kv) {
        if (k == "best_epoch") r.best_epoch = std::stoi(v);
        if (k == "best_val_dsc") r.best_val_dsc = std::stod(v);
        if (k == "unregistered_val_dsc") r.unregistered_val_dsc = std::stod(v);
        if (k == "seconds") r.seconds = std::stod(v);
    }
    r.best_checkpoint = best;
    return r;
}

template <typename F>
Summary summarize_runs(const std::vector<RunResult>& runs, F&& get)
{
    std::vector<double> v;
    for (const RunResult& r : runs) v.push_back(get(r));
    return summarize(v);
}
}  // namespace

Summary ArmResult::test_dsc() const { return summarize_runs(runs, [](const RunResult& r) { return r.test_dsc; }); }
Summary ArmResult::test_tre() const { return summarize_runs(runs, [](const RunResult& r) { return r.test_tre; }); }
Summary ArmResult::gap() const { return summarize_runs(runs, [](const RunResult& r) { return r.gap(); }); }

EvalReport ArmResult::pooled() const
{
    EvalReport r;
    r.label = arm.label;
    for (const RunResult& run : runs)
        for (EvalRow row : run.test.rows) {
            row.id += "@seed" + std::to_string(run.seed);
            r.rows.push_back(row);
        }
    return r;
}

const ArmResult& ExperimentResult::arm(const std::string& label) const
{
    for (const ArmResult& a : arms)
        if (a.arm.label == label) return a;
    throw Error("experiment has no arm '" + label + "'");
}

std::string ExperimentResult::table() const
{
    std::vector<EvalReport> reports{unregistered};
    for (const ArmResult& a : arms) reports.push_back(a.pooled());
    std::ostringstream out;
    out << format_table(reports) << '\n';
    out << "per-seed means (mean±std over seeds)\n";
    out << std::left << std::setw(22) << "arm" << std::setw(18) << "test DSC" << std::setw(18) << "test TRE (mm)"
        << std::setw(18) << "train-test gap" << "seeds\n";
    for (const ArmResult& a : arms) {
        std::string seeds;
        for (const RunResult& r : a.runs) seeds += (seeds.empty() ? "" : ",") + std::to_string(r.seed);
        out << std::left << std::setw(22) << a.arm.label << std::setw(19) << format_mean_std(a.test_dsc(), 4)
            << std::setw(19) << format_mean_std(a.test_tre(), 4) << std::setw(19) << format_mean_std(a.gap(), 4)
            << seeds << '\n';
    }
    return out.str();
}

fs::path cached_collaborative_codebook(const TrainConfig& cfg, const DataSplit& data, uint64_t seed,
                                       const fs::path& cache_dir, std::ostream* progress)
{
    const fs::path dir = cache_dir / ("seed_" + std::to_string(seed));
    const fs::path cb_path = dir / ("collaborative_K" + std::to_string(cfg.network.K_c) + ".cb");
    const std::string key = bootstrap_key(cfg, seed);
    if (fs::exists(dir / "key.ini") && read_text(dir / "key.ini") != key) fs::remove_all(dir);
    if (fs::exists(cb_path)) return cb_path;
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "key.ini", std::ios::binary);
        out << key;
    }
    const fs::path seg_path = dir / "seg.ckpt";
    TrainConfig seg_cfg = cfg;
    seg_cfg.seed = seed;
    seg_cfg.init_collaborative.clear();

    SegModel<float> seg = fs::exists(seg_path) ? seg_model_from_checkpoint(load_checkpoint(seg_path))
                                               : train_segmentation(cfg.network, cfg.bootstrap,
                                                                    training_images(data, cfg.bootstrap.seg_images),
                                                                    seed, nullptr, progress);
    if (!fs::exists(seg_path)) save_checkpoint(seg_path, "segmentation", seg_cfg.echo(), {}, seg.params());
    std::vector<Volume3D> all;
    for (const RegistrationSample& s : data.train) {
        all.push_back(s.moving);
        all.push_back(s.fixed);
    }
    const FeatureSet f = harvest_features(seg, all, cfg.bootstrap.feature_cap, seed, cfg.bootstrap.feature_layer);
    save_codebook(cb_path, init_collaborative(f, cfg.network.K_c, seed));
    return cb_path;
}

ExperimentResult run_arms(const TrainConfig& base, const std::vector<Arm>& arms, const DataSplit& data,
                          const fs::path& out_dir, std::ostream* progress)
{
    base.validate();
    fs::create_directories(out_dir);
    {
        std::ofstream cfg_out(out_dir / "config.ini");
        cfg_out << base.echo();
    }
    ExperimentResult result;
    result.unregistered = evaluate_unregistered(data.test, base.echo());

    std::ofstream runs_csv(out_dir / "runs.csv");
    {
        std::istringstream in(base.echo());
        for (std::string l; std::getline(in, l);) runs_csv << "# " << l << '\n';
    }
    runs_csv << "arm,seed,best_epoch,best_val_dsc,train_dsc,test_dsc,test_tre,gap\n";

    for (const Arm& arm : arms) {
        ArmResult ar;
        ar.arm = arm;
        for (uint64_t seed : base.seeds) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.network.enabled = arm.quantizers;
            if (arm.dict_size > 0) {
                cfg.network.K_v = arm.dict_size;
                cfg.network.K_c = arm.dict_size;
            }
            cfg.init_collaborative.clear();
            if (arm.quantizers.collaborative && arm.kmeans_init)
                cfg.init_collaborative = cached_collaborative_codebook(cfg, data, seed, out_dir / "bootstrap", progress).string();
            cfg.validate();

            const fs::path run_dir = out_dir / arm.dir_name() / ("seed_" + std::to_string(seed));
            if (progress) *progress << "== arm " << arm.label << " seed " << seed << " -> " << run_dir.string() << std::endl;
            RunResult rr;
            rr.seed = seed;
            if (auto done = finished_run(run_dir, cfg.echo())) {
                if (progress) *progress << "   reusing the finished run" << std::endl;
                rr.train = *done;
            } else {
                rr.train = train(cfg, data, run_dir, progress);
                write_run_summary(run_dir, rr.train);
            }
            const RegModel<float> best = model_from_checkpoint(load_checkpoint(rr.train.best_checkpoint));
            rr.test = evaluate_model(best, data.test, arm.label, cfg.echo());
            rr.train_dsc = mean_dsc(best, data.train);
            rr.test_dsc = rr.test.aggregate("dsc").mean;
            rr.test_tre = rr.test.aggregate("tre").mean;
            {
                std::ofstream rep(run_dir / "test_report.csv");
                rep << rr.test.to_csv();
            }
            runs_csv << arm.label << ',' << seed << ',' << rr.train.best_epoch << ',' << format_real(rr.train.best_val_dsc)
                     << ',' << format_real(rr.train_dsc) << ',' << format_real(rr.test_dsc) << ','
                     << format_real(rr.test_tre) << ',' << format_real(rr.gap()) << '\n';
            runs_csv.flush();
            ar.runs.push_back(std::move(rr));
        }
        result.arms.push_back(std::move(ar));
        std::ofstream table(out_dir / "table.txt");
        table << result.table();
        table << '\n';
        std::istringstream in(base.echo());
        for (std::string l; std::getline(in, l);) table << "# " << l << '\n';
    }
    return result;
}

}  // namespace vqreg
