#include "vqreg/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "vqreg/transform.hpp"
#include "vqreg/volume_io.hpp"

namespace vqreg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- configuration

TrainConfig TrainConfig::desk()
{
    TrainConfig c;
    c.profile = "desk";
    c.network = NetworkConfig::desk();
    c.network.enabled = QuantizerSet::all();
    c.loss.quant = 1e-4;
    c.loss.bending = 50;
    c.optim = {1e-3, 4, 200};
    c.data.synth.dims = c.network.input_dims;
    c.data.synth.spacing = {0.7, 0.7, 0.7};
    c.data.synth.deform_amplitude_mm = 5.0;
    c.data.synth.diffeomorphic = true;
    return c;
}

TrainConfig TrainConfig::paper()
{
    TrainConfig c;
    c.profile = "paper";
    c.network = NetworkConfig::paper();
    c.loss = LossWeights{};
    c.optim = {1e-4, 4, 1000};
    c.train_eval_pairs = 0;
    c.data.pairs = 216;
    c.data.synth.dims = c.network.input_dims;
    c.data.synth.spacing = {0.7, 0.7, 0.7};
    c.data.synth.deform_amplitude_mm = 5.0;
    c.data.synth.diffeomorphic = true;
    c.bootstrap.seg_images = 100000;
    return c;
}

TrainConfig TrainConfig::profile_defaults(const std::string& name)
{
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw Error("unknown profile '" + name + "' (expected desk or paper)");
}

namespace {

std::string join_seeds(const std::vector<uint64_t>& s)
{
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out;
}

std::vector<uint64_t> parse_seeds(const std::string& v)
{
    std::vector<uint64_t> out;
    std::stringstream ss(v);
    for (std::string tok; std::getline(ss, tok, ',');) out.push_back(std::stoull(tok));
    return out;
}

bool parse_bool(const std::string& v)
{
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("not a boolean");
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

}  // namespace

ConfigDoc TrainConfig::to_doc() const
{
    ConfigDoc d;
    d.sections.push_back({"run",
                          {{"profile", profile},
                           {"seed", std::to_string(seed)},
                           {"seeds", join_seeds(seeds)},
                           {"train_eval_pairs", std::to_string(train_eval_pairs)}}});
    const SynthParams& s = data.synth;
    d.sections.push_back({"data",
                          {{"pairs", std::to_string(data.pairs)},
                           {"base_seed", std::to_string(data.base_seed)},
                           {"dims", std::to_string(s.dims.x) + " " + std::to_string(s.dims.y) + " " +
                                        std::to_string(s.dims.z)},
                           {"spacing", format_vec3(s.spacing)},
                           {"amplitude_mm", format_real(s.deform_amplitude_mm)},
                           {"diffeomorphic", bool_str(s.diffeomorphic)},
                           {"noise", bool_str(s.noise)},
                           {"noise_sigma", format_real(s.noise_sigma)},
                           {"train_fraction", format_real(data.train_fraction)},
                           {"val_fraction", format_real(data.val_fraction)},
                           {"dir", data.dir}}});
    KeyValues net;
    for (auto& kv : network.to_kv())
        if (kv.first != "beta") net.push_back(kv);
    d.sections.push_back({"network", net});
    d.sections.push_back({"loss", loss.to_kv()});
    d.sections.push_back({"optim",
                          {{"lr", format_real(optim.lr)},
                           {"batch_size", std::to_string(optim.batch_size)},
                           {"epochs", std::to_string(optim.epochs)}}});
    d.sections.push_back({"bootstrap",
                          {{"seg_epochs", std::to_string(bootstrap.seg_epochs)},
                           {"seg_lr", format_real(bootstrap.seg_lr)},
                           {"seg_images", std::to_string(bootstrap.seg_images)},
                           {"feature_cap", std::to_string(bootstrap.feature_cap)},
                           {"feature_layer", bootstrap.feature_layer}}});
    d.sections.push_back({"init", {{"collaborative", init_collaborative}}});
    return d;
}

TrainConfig TrainConfig::from_doc(const ConfigDoc& doc)
{
    std::string profile = "desk";
    if (const KeyValues* run = doc.section("run"))
        for (const auto& [k, v] : *run)
            if (k == "profile") profile = v;
    TrainConfig c = profile_defaults(profile);

    for (const auto& [section, kv] : doc.sections) {
        if (section == "network") {
            KeyValues net = c.network.to_kv();
            for (const auto& [k, v] : kv) {
                if (k == "beta") throw Error("config: set beta under [loss], not [network]");
                bool found = false;
                for (auto& [nk, nv] : net)
                    if (nk == k) {
                        nv = v;
                        found = true;
                    }
                if (!found) throw Error("config: unknown key network." + k);
            }
            c.network = NetworkConfig::from_kv(net);
            continue;
        }
        if (section == "loss") {
            KeyValues merged = c.loss.to_kv();
            for (const auto& [k, v] : kv) {
                bool found = false;
                for (auto& [mk, mv] : merged)
                    if (mk == k) {
                        mv = v;
                        found = true;
                    }
                if (!found) throw Error("config: unknown key loss." + k);
            }
            c.loss = LossWeights::from_kv(merged);
            continue;
        }
        for (const auto& [k, v] : kv) {
            const std::string key = section + "." + k;
            try {
                if (key == "run.profile") continue;
                if (key == "run.seed") c.seed = std::stoull(v);
                else if (key == "run.seeds") c.seeds = parse_seeds(v);
                else if (key == "run.train_eval_pairs") c.train_eval_pairs = std::stoi(v);
                else if (key == "data.pairs") c.data.pairs = std::stoi(v);
                else if (key == "data.base_seed") c.data.base_seed = std::stoull(v);
                else if (key == "data.dims") c.data.synth.dims = parse_dims(v);
                else if (key == "data.spacing") c.data.synth.spacing = parse_vec3(v);
                else if (key == "data.amplitude_mm") c.data.synth.deform_amplitude_mm = std::stod(v);
                else if (key == "data.diffeomorphic") c.data.synth.diffeomorphic = parse_bool(v);
                else if (key == "data.noise") c.data.synth.noise = parse_bool(v);
                else if (key == "data.noise_sigma") c.data.synth.noise_sigma = std::stod(v);
                else if (key == "data.train_fraction") c.data.train_fraction = std::stod(v);
                else if (key == "data.val_fraction") c.data.val_fraction = std::stod(v);
                else if (key == "data.dir") c.data.dir = v;
                else if (key == "optim.lr") c.optim.lr = std::stod(v);
                else if (key == "optim.batch_size") c.optim.batch_size = std::stoi(v);
                else if (key == "optim.epochs") c.optim.epochs = std::stoi(v);
                else if (key == "bootstrap.seg_epochs") c.bootstrap.seg_epochs = std::stoi(v);
                else if (key == "bootstrap.seg_lr") c.bootstrap.seg_lr = std::stod(v);
                else if (key == "bootstrap.seg_images") c.bootstrap.seg_images = std::stoi(v);
                else if (key == "bootstrap.feature_cap") c.bootstrap.feature_cap = std::stoll(v);
                else if (key == "bootstrap.feature_layer") c.bootstrap.feature_layer = v;
                else if (key == "init.collaborative") c.init_collaborative = v;
                else throw Error("config: unknown key " + key);
            } catch (const std::logic_error&) {
                throw Error("config: bad value for " + key + ": '" + v + "'");
            }
        }
    }
    c.network.beta = c.loss.beta;
    c.validate();
    return c;
}

void TrainConfig::validate() const
{
    network.validate();
    loss.validate();
    bootstrap.validate();
    if (network.beta != loss.beta) throw Error("config: network beta and loss beta differ");
    if (!(optim.lr > 0)) throw Error("config: optim.lr must be > 0");
    if (optim.batch_size < 1) throw Error("config: optim.batch_size must be >= 1");
    if (optim.epochs < 0) throw Error("config: optim.epochs must be >= 0");
    if (seeds.empty()) throw Error("config: run.seeds must list at least one seed");
    if (train_eval_pairs < 0) throw Error("config: run.train_eval_pairs must be >= 0");
    if (data.pairs < 3) throw Error("config: data.pairs must be >= 3");
    if (!(data.train_fraction > 0) || !(data.val_fraction > 0) || data.train_fraction + data.val_fraction >= 1)
        throw Error("config: train/val fractions must be positive and leave room for a test split");
    if (data.dir.empty() && !(data.synth.dims == network.input_dims))
        throw Error("config: data.dims " + to_string(data.synth.dims) + " differ from network.input_dims " +
                    to_string(network.input_dims));
    if (profile == "paper" && optim.epochs > 1000) throw Error("config: paper profile allows at most 1000 epochs");
}

// ---------------------------------------------------------------- data

namespace {

std::string pair_dir_name(int n)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%04d", n);
    return buf;
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

void comment_block(std::ostream& out, const std::string& text)
{
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out << "# " << line << '\n';
}

}  // namespace

void write_dataset(const fs::path& dir, const DataConfig& cfg, const std::string& config_echo)
{
    fs::create_directories(dir);
    std::ostringstream manifest;
    comment_block(manifest, config_echo);
    for (int n = 0; n < cfg.pairs; ++n) {
        const SynthSample s = synth_sample(cfg.base_seed + uint64_t(n), cfg.synth);
        const fs::path p = dir / pair_dir_name(n);
        fs::create_directories(p);
        save_volume(p / "moving.vol", s.sample.moving, DType::f64);
        save_volume(p / "fixed.vol", s.sample.fixed, DType::f64);
        save_mask(p / "moving.mask", s.sample.moving_mask);
        save_mask(p / "fixed.mask", s.sample.fixed_mask);
        save_landmarks(p / "moving_landmarks.txt", s.sample.moving_landmarks);
        save_landmarks(p / "fixed_landmarks.txt", s.sample.fixed_landmarks);
        save_ddf(p / "truth.ddf", s.ground_truth);
        manifest << s.sample.subject_id << ' ' << pair_dir_name(n) << '\n';
    }
    write_text(dir / "manifest.txt", manifest.str());
}

std::vector<RegistrationSample> load_pairs(const DataConfig& cfg)
{
    std::vector<RegistrationSample> out;
    if (cfg.dir.empty()) {
        for (SynthSample& s : synth_dataset(cfg.pairs, cfg.base_seed, cfg.synth)) out.push_back(std::move(s.sample));
        return out;
    }
    const fs::path dir(cfg.dir);
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw Error("dataset: missing " + (dir / "manifest.txt").string());
    for (std::string line; std::getline(in, line);) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string id, sub;
        ls >> id >> sub;
        const fs::path p = dir / sub;
        RegistrationSample s;
        s.subject_id = id;
        s.moving = load_any_volume(p / "moving.vol");
        s.fixed = load_any_volume(p / "fixed.vol");
        s.moving_mask = load_mask(p / "moving.mask");
        s.fixed_mask = load_mask(p / "fixed.mask");
        s.moving_landmarks = load_landmarks(p / "moving_landmarks.txt");
        s.fixed_landmarks = load_landmarks(p / "fixed_landmarks.txt");
        s.validate();
        out.push_back(std::move(s));
    }
    if (out.empty()) throw Error("dataset: manifest lists no pairs");
    return out;
}

DataSplit load_split(const DataConfig& cfg)
{
    std::vector<RegistrationSample> all = load_pairs(cfg);
    const int n = int(all.size());
    const int n_train = int(std::lround(cfg.train_fraction * n));
    const int n_val = int(std::lround(cfg.val_fraction * n));
    if (n_train < 1 || n_val < 1 || n - n_train - n_val < 1)
        throw Error("dataset: " + std::to_string(n) + " pairs are too few for a train/val/test split");
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.base_seed ^ 0x5b117ULL);
    std::shuffle(order.begin(), order.end(), rng);
    DataSplit s;
    for (int i = 0; i < n; ++i) {
        auto& part = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
        part.push_back(std::move(all[size_t(order[size_t(i)])]));
    }
    return s;
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr const char* kCheckpointMagic = "vqreg-checkpoint";
constexpr int kCheckpointVersion = 1;

std::string shape_str(const std::vector<int64_t>& s)
{
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out.empty() ? "-" : out;
}
}  // namespace

void save_checkpoint(const fs::path& path, const std::string& kind, const std::string& config_echo,
                     const KeyValues& meta, const nn::ParamList<float>& params)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot write " + path.string());
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    out << "kind = " << kind << '\n';
    for (const auto& [k, v] : meta) out << "meta." << k << " = " << v << '\n';
    std::vector<std::string> lines;
    {
        std::istringstream in(config_echo);
        for (std::string l; std::getline(in, l);) lines.push_back(l);
    }
    out << "config_lines = " << lines.size() << '\n';
    for (const auto& l : lines) out << l << '\n';
    out << "params = " << params.size() << '\n';
    for (const auto* p : params) out << p->name << ' ' << shape_str(p->shape) << ' ' << p->numel() << '\n';
    out << "payload\n";
    for (const auto* p : params) {
        static_assert(sizeof(float) == 4);
        out.write(reinterpret_cast<const char*>(p->value.data()), std::streamsize(p->value.size() * sizeof(float)));
    }
    if (!out) throw Error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path.string());
    auto next = [&](const char* what) {
        std::string l;
        if (!std::getline(in, l)) throw Error(std::string("checkpoint: truncated before ") + what);
        return l;
    };
    auto value_of = [](const std::string& line, const std::string& key) {
        const std::string prefix = key + " = ";
        if (line.rfind(prefix, 0) != 0) throw Error("checkpoint: expected '" + key + "', found '" + line + "'");
        return line.substr(prefix.size());
    };
    {
        std::istringstream h(next("header"));
        std::string magic;
        int version = 0;
        h >> magic >> version;
        if (magic != kCheckpointMagic) throw Error("checkpoint: " + path.string() + " is not a checkpoint");
        if (version != kCheckpointVersion)
            throw Error("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.kind = value_of(next("kind"), "kind");
    std::string line = next("config");
    while (line.rfind("meta.", 0) == 0) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw Error("checkpoint: malformed meta line '" + line + "'");
        ck.meta.emplace_back(line.substr(5, eq - 5), line.substr(eq + 3));
        line = next("config");
    }
    const size_t n_lines = std::stoull(value_of(line, "config_lines"));
    for (size_t i = 0; i < n_lines; ++i) ck.config_text += next("config body") + "\n";
    const size_t n_params = std::stoull(value_of(next("params"), "params"));
    for (size_t i = 0; i < n_params; ++i) {
        std::istringstream ps(next("param table"));
        NamedArray a;
        std::string shape;
        int64_t count = 0;
        ps >> a.name >> shape >> count;
        if (!ps || count < 0) throw Error("checkpoint: malformed param entry");
        if (shape != "-") {
            std::stringstream ss(shape);
            for (std::string tok; std::getline(ss, tok, ',');) a.shape.push_back(std::stoll(tok));
        }
        a.values.resize(size_t(count));
        ck.params.push_back(std::move(a));
    }
    if (next("payload") != "payload") throw Error("checkpoint: missing payload marker");
    for (NamedArray& a : ck.params) {
        in.read(reinterpret_cast<char*>(a.values.data()), std::streamsize(a.values.size() * sizeof(float)));
        if (!in) throw Error("checkpoint: payload truncated at '" + a.name + "'");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error("checkpoint: trailing bytes after payload");
    return ck;
}

void assign_params(const Checkpoint& ck, const nn::ParamList<float>& params)
{
    if (ck.params.size() != params.size())
        throw Error("checkpoint: holds " + std::to_string(ck.params.size()) + " parameters, model has " +
                    std::to_string(params.size()));
    for (auto* p : params) {
        const NamedArray* hit = nullptr;
        for (const NamedArray& a : ck.params)
            if (a.name == p->name) hit = &a;
        if (!hit) throw Error("checkpoint: missing parameter '" + p->name + "'");
        if (hit->shape != p->shape || int64_t(hit->values.size()) != p->numel())
            throw Error("checkpoint: shape mismatch for '" + p->name + "'");
        p->value = hit->values;
    }
}

RegModel<float> model_from_checkpoint(const Checkpoint& ck)
{
    if (ck.kind != "registration") throw Error("checkpoint: expected a registration checkpoint, found " + ck.kind);
    const TrainConfig cfg = TrainConfig::from_doc(ConfigDoc::parse(ck.config_text));
    RegModel<float> model(cfg.network, cfg.seed);
    assign_params(ck, model.params());
    return model;
}

SegModel<float> seg_model_from_checkpoint(const Checkpoint& ck)
{
    if (ck.kind != "segmentation") throw Error("checkpoint: expected a segmentation checkpoint, found " + ck.kind);
    const TrainConfig cfg = TrainConfig::from_doc(ConfigDoc::parse(ck.config_text));
    SegModel<float> model(cfg.network, cfg.seed);
    assign_params(ck, model.params());
    return model;
}

void require_same_network(const NetworkConfig& checkpoint, const NetworkConfig& requested)
{
    if (checkpoint == requested) return;
    std::string diff;
    const auto a = checkpoint.to_kv(), b = requested.to_kv();
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].second != b[i].second) diff += " " + a[i].first + " (" + a[i].second + " vs " + b[i].second + ")";
    throw Error("checkpoint network config does not match the requested config:" + diff);
}

// ---------------------------------------------------------------- inference

DisplacementField predict_ddf(const RegModel<float>& model, const Volume3D& moving, const Volume3D& fixed)
{
    if (!(moving.dims() == fixed.dims())) throw Error("register: moving and fixed dims differ");
    const auto fw = model.forward(moving.to_tensor<float>(), fixed.to_tensor<float>());
    DisplacementField ddf(fixed.geometry());
    for (int64_t i = 0; i < fw.ddf.size(); ++i) ddf.data[i] = double(fw.ddf[i]);
    return ddf;
}

double mean_dsc(const RegModel<float>& model, const std::vector<RegistrationSample>& samples)
{
    if (samples.empty()) throw Error("mean_dsc: no samples");
    double sum = 0;
    for (const RegistrationSample& s : samples) {
        const DisplacementField ddf = predict_ddf(model, s.moving, s.fixed);
        const MaskVolume w = resample(s.moving_mask, ddf, ResampleSpec{.mask_mode = MaskMode::threshold});
        sum += dsc(w, s.fixed_mask.thresholded());
    }
    return sum / double(samples.size());
}

namespace {
KeyValues report_metadata(size_t n)
{
    return {{"pairs", std::to_string(n)},
            {"units", "CD and TRE in mm; MSE in squared intensity"},
            {"dsc", "0.5-thresholded warped moving mask vs fixed mask"},
            {"tre", "forward warp of fixed landmarks, no field inversion"}};
}
}  // namespace

EvalReport evaluate_model(const RegModel<float>& model, const std::vector<RegistrationSample>& samples,
                          const std::string& label, const std::string& config_echo)
{
    EvalReport r;
    r.label = label;
    r.metadata = report_metadata(samples.size());
    r.config_echo = config_echo;
    for (const RegistrationSample& s : samples) r.rows.push_back(evaluate_pair(s, predict_ddf(model, s.moving, s.fixed)));
    return r;
}

EvalReport evaluate_unregistered(const std::vector<RegistrationSample>& samples, const std::string& config_echo)
{
    EvalReport r;
    r.label = "w/o registration";
    r.metadata = report_metadata(samples.size());
    r.config_echo = config_echo;
    for (const RegistrationSample& s : samples) r.rows.push_back(evaluate_pair(s, DisplacementField(s.fixed.geometry())));
    return r;
}

// ---------------------------------------------------------------- training

void apply_codebook_init(const TrainConfig& cfg, RegModel<float>& model)
{
    if (cfg.init_collaborative.empty()) return;
    if (!cfg.network.enabled.collaborative)
        throw Error("init.collaborative is set but the collaborative quantizer is disabled");
    model.quantizer(QuantizerName::collaborative).load(load_codebook(cfg.init_collaborative));
}

namespace {

bool finite_terms(const LossTerms& t)
{
    for (double v : {t.vanilla, t.hierarchical, t.collaborative, t.ssd, t.dice, t.bending, t.total})
        if (!std::isfinite(v)) return false;
    return true;
}

void add_terms(LossTerms& acc, const LossTerms& t, double w)
{
    acc.vanilla += w * t.vanilla;
    acc.hierarchical += w * t.hierarchical;
    acc.collaborative += w * t.collaborative;
    acc.ssd += w * t.ssd;
    acc.dice += w * t.dice;
    acc.bending += w * t.bending;
    acc.total += w * t.total;
}

std::string terms_csv(const LossTerms& t)
{
    return format_real(t.vanilla) + "," + format_real(t.hierarchical) + "," + format_real(t.collaborative) + "," +
           format_real(t.ssd) + "," + format_real(t.dice) + "," + format_real(t.bending) + "," + format_real(t.total);
}

[[noreturn]] void dump_batch(const fs::path& out_dir, const std::vector<const RegistrationSample*>& batch,
                             const std::vector<LossTerms>& terms, int epoch, int64_t step, const std::string& why)
{
    const fs::path d = out_dir / "nonfinite_batch";
    fs::create_directories(d);
    std::ostringstream info;
    info << "reason: " << why << "\nepoch: " << epoch << "\nstep: " << step << '\n';
    for (size_t i = 0; i < batch.size(); ++i) {
        const RegistrationSample& s = *batch[i];
        save_volume(d / (s.subject_id + "_moving.vol"), s.moving, DType::f64);
        save_volume(d / (s.subject_id + "_fixed.vol"), s.fixed, DType::f64);
        info << s.subject_id;
        if (i < terms.size()) info << " terms(v,h,c,ssd,dice,bend,total) " << terms_csv(terms[i]);
        info << '\n';
    }
    write_text(d / "info.txt", info.str());
    throw Error("training aborted at epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + why +
                " (batch dumped to " + d.string() + ")");
}

struct UsageCounter {
    std::vector<int64_t> counts;
    void add(const std::vector<int32_t>& idx)
    {
        for (int32_t i : idx) ++counts[size_t(i)];
    }
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const DataSplit& data, const fs::path& out_dir, std::ostream* progress)
{
    cfg.validate();
    if (data.train.empty() || data.val.empty()) throw Error("train: need non-empty train and validation splits");
    const auto t_start = std::chrono::steady_clock::now();
    fs::create_directories(out_dir);
    const std::string echo = cfg.echo();
    write_text(out_dir / "config.ini", echo);

    RegModel<float> model(cfg.network, cfg.seed);
    apply_codebook_init(cfg, model);
    const auto params = model.params();
    nn::Adam<float> opt(cfg.optim.lr);

    std::vector<PairTensors<float>> pairs;
    for (const RegistrationSample& s : data.train) pairs.push_back(PairTensors<float>::from(s));
    const size_t n_eval = cfg.train_eval_pairs == 0 ? data.train.size()
                                                    : std::min(data.train.size(), size_t(cfg.train_eval_pairs));
    const std::vector<RegistrationSample> train_eval(data.train.begin(), data.train.begin() + std::ptrdiff_t(n_eval));

    std::ofstream loss_log(out_dir / "loss_log.csv"), curves(out_dir / "curves.csv"), usage(out_dir / "usage.csv");
    for (std::ofstream* f : {&loss_log, &curves, &usage}) comment_block(*f, echo);
    loss_log << "step,epoch,L_V,L_H,L_C,L_SSD,L_Dice,L_Bend,total\n";
    curves << "epoch,train_dsc,val_dsc,gap,L_V,L_H,L_C,L_SSD,L_Dice,L_Bend,total\n";
    usage << "epoch,quantizer,used_codes,counts\n";

    TrainResult result;
    {
        double s = 0;
        for (const RegistrationSample& v : data.val) s += dsc(v.moving_mask.thresholded(), v.fixed_mask.thresholded());
        result.unregistered_val_dsc = s / double(data.val.size());
    }

    const std::vector<std::pair<QuantizerName, bool>> quantizers{
        {QuantizerName::vanilla, cfg.network.enabled.vanilla},
        {QuantizerName::hierarchical, cfg.network.enabled.hierarchical},
        {QuantizerName::collaborative, cfg.network.enabled.collaborative}};

    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed ^ 0x7a11ULL);
    int64_t step = 0;
    const size_t B = size_t(cfg.optim.batch_size);

    for (int epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossTerms epoch_sum;
        std::vector<UsageCounter> use(3);
        for (size_t q = 0; q < 3; ++q) use[q].counts.assign(size_t(model.quantizer(quantizers[q].first).K()), 0);

        for (size_t b0 = 0; b0 < order.size(); b0 += B) {
            const size_t b1 = std::min(order.size(), b0 + B);
            const float inv = 1.0f / float(b1 - b0);
            model.zero_grad();
            LossTerms batch_sum;
            std::vector<const RegistrationSample*> batch;
            std::vector<LossTerms> batch_terms;
            for (size_t n = b0; n < b1; ++n) batch.push_back(&data.train[order[n]]);
            for (size_t n = b0; n < b1; ++n) {
                const PairTensors<float>& pair = pairs[order[n]];
                auto fw = model.forward(pair.moving, pair.fixed);
                Tensor<float> grad;
                const LossTerms t = registration_objective(fw.ddf, pair, fw.losses, cfg.loss, &grad);
                batch_terms.push_back(t);
                if (!finite_terms(t)) dump_batch(out_dir, batch, batch_terms, epoch, step, "non-finite loss");
                for (float& v : grad.span()) v *= inv;
                model.backward(fw, grad, float(cfg.loss.quant) * inv);
                if (quantizers[0].second) use[0].add(fw.qv.indices);
                if (quantizers[1].second) use[1].add(fw.qh.indices);
                if (quantizers[2].second) use[2].add(fw.qc.indices);
                add_terms(batch_sum, t, 1.0 / double(b1 - b0));
            }
            for (const auto* p : params)
                for (float g : p->grad)
                    if (!std::isfinite(g)) dump_batch(out_dir, batch, batch_terms, epoch, step, "non-finite gradient in " + p->name);
            opt.step(params);
            ++step;
            loss_log << step << ',' << epoch << ',' << terms_csv(batch_sum) << '\n';
            add_terms(epoch_sum, batch_sum, double(b1 - b0) / double(order.size()));
        }

        EpochStats es;
        es.epoch = epoch;
        es.mean_terms = epoch_sum;
        es.val_dsc = mean_dsc(model, data.val);
        es.train_dsc = mean_dsc(model, train_eval);
        result.epochs.push_back(es);
        curves << epoch << ',' << format_real(es.train_dsc) << ',' << format_real(es.val_dsc) << ','
               << format_real(es.train_dsc - es.val_dsc) << ',' << terms_csv(epoch_sum) << '\n';
        for (size_t q = 0; q < 3; ++q) {
            if (!quantizers[q].second) continue;
            int64_t used = 0;
            std::string counts;
            for (size_t k = 0; k < use[q].counts.size(); ++k) {
                used += use[q].counts[k] > 0;
                counts += (k ? " " : "") + std::to_string(use[q].counts[k]);
            }
            usage << epoch << ',' << to_string(quantizers[q].first) << ',' << used << ',' << counts << '\n';
        }
        if (es.val_dsc > result.best_val_dsc) {
            result.best_val_dsc = es.val_dsc;
            result.best_epoch = epoch;
            result.best_checkpoint = out_dir / "best.ckpt";
            save_checkpoint(result.best_checkpoint, "registration", echo,
                            {{"epoch", std::to_string(epoch)}, {"val_dsc", format_real(es.val_dsc)}}, params);
        }
        if (progress) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
            *progress << "epoch " << epoch << "/" << cfg.optim.epochs << " loss " << epoch_sum.total << " ssd "
                      << epoch_sum.ssd << " dice " << epoch_sum.dice << " bend " << epoch_sum.bending << " q "
                      << epoch_sum.vanilla + epoch_sum.hierarchical + epoch_sum.collaborative << " | train dsc "
                      << es.train_dsc << " val dsc " << es.val_dsc << " (unreg " << result.unregistered_val_dsc
                      << ") " << secs << " s" << std::endl;
        }
        loss_log.flush();
        curves.flush();
        usage.flush();
    }
    save_checkpoint(out_dir / "final.ckpt", "registration", echo, {{"epoch", std::to_string(cfg.optim.epochs)}}, params);
    if (result.best_epoch < 0) {
        // zero epochs: the initial model is the best one seen
        result.best_checkpoint = out_dir / "best.ckpt";
        save_checkpoint(result.best_checkpoint, "registration", echo, {{"epoch", "0"}}, params);
        result.best_epoch = 0;
        result.best_val_dsc = mean_dsc(model, data.val);
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

// ---------------------------------------------------------------- codebook bootstrap

std::vector<LabeledImage> training_images(const DataSplit& data, int count)
{
    std::vector<LabeledImage> out;
    for (const RegistrationSample& s : data.train) {
        if (int(out.size()) >= count) break;
        out.push_back({s.moving, s.moving_mask});
        if (int(out.size()) >= count) break;
        out.push_back({s.fixed, s.fixed_mask});
    }
    return out;
}

Codebook bootstrap_collaborative(const TrainConfig& cfg, const DataSplit& data, uint64_t seed, std::ostream* progress,
                                 SegModel<float>* model_out)
{
    if (cfg.network.channels.back() != cfg.network.C_c && cfg.bootstrap.feature_layer == "deepest")
        throw Error("bootstrap: the deepest encoder stage has " + std::to_string(cfg.network.channels.back()) +
                    " channels but C_c is " + std::to_string(cfg.network.C_c));
    const auto images = training_images(data, cfg.bootstrap.seg_images);
    SegModel<float> seg = train_segmentation(cfg.network, cfg.bootstrap, images, seed, nullptr, progress);
    std::vector<Volume3D> all;
    for (const RegistrationSample& s : data.train) {
        all.push_back(s.moving);
        all.push_back(s.fixed);
    }
    const FeatureSet f = harvest_features(seg, all, cfg.bootstrap.feature_cap, seed, cfg.bootstrap.feature_layer);
    if (f.C != cfg.network.C_c)
        throw Error("bootstrap: harvested " + std::to_string(f.C) + "-channel features but C_c is " +
                    std::to_string(cfg.network.C_c));
    Codebook cb = init_collaborative(f, cfg.network.K_c, seed);
    if (model_out) *model_out = std::move(seg);
    return cb;
}

}  // namespace vqreg
