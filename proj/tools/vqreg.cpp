// Command-line front end: data synthesis, codebook bootstrap, training, registration,
// evaluation and the comparison experiments.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vqreg/experiments.hpp"
#include "vqreg/transform.hpp"
#include "vqreg/volume_io.hpp"

using namespace vqreg;
namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
    std::string path;
    std::string profile;
    std::vector<std::string> overrides;

    void attach(CLI::App* app)
    {
        app->add_option("-c,--config", path, "INI config file");
        app->add_option("--profile", profile, "start from a built-in profile (desk or paper)");
        app->add_option("-s,--set", overrides, "override a key, e.g. optim.epochs=20")->take_all();
    }

    [[nodiscard]] TrainConfig load() const
    {
        ConfigDoc doc = path.empty() ? ConfigDoc{} : ConfigDoc::load(path);
        if (!profile.empty()) doc.set("run", "profile", profile);
        for (const auto& o : overrides) doc.apply_override(o);
        return TrainConfig::from_doc(doc);
    }
};

void write_file(const fs::path& p, const std::string& text)
{
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

std::string commented(const std::string& text)
{
    std::ostringstream out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out << "# " << l << '\n';
    return out.str();
}

const std::vector<RegistrationSample>& pick_split(const DataSplit& d, const std::string& name)
{
    if (name == "train") return d.train;
    if (name == "val") return d.val;
    if (name == "test") return d.test;
    throw Error("unknown split '" + name + "' (train, val or test)");
}

}  // namespace

int main(int argc, char** argv)
{
    configure_threads();
    CLI::App app{"vqreg: deformable registration with quantized bottlenecks"};
    app.require_subcommand(1);

    // synth-data
    ConfigArgs synth_cfg;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth-data", "write the synthetic pair set to a directory");
    synth_cfg.attach(synth);
    synth->add_option("-o,--out", synth_out, "output directory")->required();

    // train-seg
    ConfigArgs seg_cfg;
    std::string seg_out;
    auto* seg = app.add_subcommand("train-seg", "train the segmentation network used for codebook bootstrap");
    seg_cfg.attach(seg);
    seg->add_option("-o,--out", seg_out, "output directory")->required();

    // init-codebook
    ConfigArgs cb_cfg;
    std::string cb_seg, cb_out;
    auto* cb = app.add_subcommand("init-codebook", "K-means collaborative codebook from segmentation features");
    cb_cfg.attach(cb);
    cb->add_option("--seg-checkpoint", cb_seg, "segmentation checkpoint from train-seg")->required();
    cb->add_option("-o,--out", cb_out, "codebook file")->required();

    // train
    ConfigArgs tr_cfg;
    std::string tr_out, tr_init;
    auto* tr = app.add_subcommand("train", "train a registration model");
    tr_cfg.attach(tr);
    tr->add_option("-o,--out", tr_out, "output directory")->required();
    tr->add_option("--init-collaborative", tr_init, "codebook file for the collaborative quantizer");

    // register
    std::string rg_ckpt, rg_moving, rg_fixed, rg_ddf, rg_warped, rg_mm, rg_fm, rg_ml, rg_fl, rg_config;
    auto* rg = app.add_subcommand("register", "predict the field for one pair");
    rg->add_option("--checkpoint", rg_ckpt)->required();
    rg->add_option("--moving", rg_moving)->required();
    rg->add_option("--fixed", rg_fixed)->required();
    rg->add_option("--out-ddf", rg_ddf)->required();
    rg->add_option("--out-warped", rg_warped, "warped moving image (default: next to the field)");
    rg->add_option("--moving-mask", rg_mm);
    rg->add_option("--fixed-mask", rg_fm);
    rg->add_option("--moving-landmarks", rg_ml);
    rg->add_option("--fixed-landmarks", rg_fl);
    rg->add_option("-c,--config", rg_config, "refuse to run if its network section differs from the checkpoint");

    // evaluate
    ConfigArgs ev_cfg;
    std::string ev_ckpt, ev_out, ev_split = "test";
    auto* ev = app.add_subcommand("evaluate", "metric report for a checkpoint on a data split");
    ev_cfg.attach(ev);
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("-o,--out", ev_out, "output directory")->required();
    ev->add_option("--split", ev_split, "train, val or test");

    // ablate
    ConfigArgs ab_cfg;
    std::string ab_out;
    auto* ab = app.add_subcommand("ablate", "train and compare every quantizer subset over the configured seeds");
    ab_cfg.attach(ab);
    ab->add_option("-o,--out", ab_out, "output directory")->required();

    // sweep-dict-size
    ConfigArgs sw_cfg;
    std::string sw_out;
    std::vector<int64_t> sw_sizes{32, 64, 128, 256};
    auto* sw = app.add_subcommand("sweep-dict-size", "vary the vanilla and collaborative dictionary size");
    sw_cfg.attach(sw);
    sw->add_option("-o,--out", sw_out, "output directory")->required();
    sw->add_option("--sizes", sw_sizes, "dictionary sizes")->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            const TrainConfig cfg = synth_cfg.load();
            write_dataset(synth_out, cfg.data, cfg.echo());
            write_file(fs::path(synth_out) / "config.ini", cfg.echo());
            std::cout << "wrote " << cfg.data.pairs << " pairs to " << synth_out << '\n';
        } else if (*seg) {
            const TrainConfig cfg = seg_cfg.load();
            const DataSplit data = load_split(cfg.data);
            SegTrainLog log;
            const auto images = training_images(data, cfg.bootstrap.seg_images);
            const SegModel<float> model = train_segmentation(cfg.network, cfg.bootstrap, images, cfg.seed, &log, &std::cout);
            SegModel<float> copy = model;
            save_checkpoint(fs::path(seg_out) / "seg.ckpt", "segmentation", cfg.echo(), {}, copy.params());
            std::vector<LabeledImage> held_out;
            for (const RegistrationSample& s : data.val) held_out.push_back({s.fixed, s.fixed_mask});
            std::ostringstream csv;
            csv << commented(cfg.echo()) << "epoch,train_soft_dice\n";
            for (size_t e = 0; e < log.epoch_dice.size(); ++e) csv << e + 1 << ',' << format_real(log.epoch_dice[e]) << '\n';
            write_file(fs::path(seg_out) / "seg_log.csv", csv.str());
            write_file(fs::path(seg_out) / "config.ini", cfg.echo());
            std::cout << "train dice " << segmentation_dice(model, images) << ", held-out dice "
                      << segmentation_dice(model, held_out) << '\n';
        } else if (*cb) {
            const TrainConfig cfg = cb_cfg.load();
            const Checkpoint ck = load_checkpoint(cb_seg);
            require_same_network(TrainConfig::from_doc(ConfigDoc::parse(ck.config_text)).network, cfg.network);
            const SegModel<float> model = seg_model_from_checkpoint(ck);
            const DataSplit data = load_split(cfg.data);
            std::vector<Volume3D> train_imgs, val_imgs;
            for (const auto& s : data.train) {
                train_imgs.push_back(s.moving);
                train_imgs.push_back(s.fixed);
            }
            for (const auto& s : data.val) val_imgs.push_back(s.fixed);
            const FeatureSet f = harvest_features(model, train_imgs, cfg.bootstrap.feature_cap, cfg.seed,
                                                  cfg.bootstrap.feature_layer);
            const Codebook book = init_collaborative(f, cfg.network.K_c, cfg.seed);
            save_codebook(cb_out, book);
            const FeatureSet held = harvest_features(model, val_imgs, cfg.bootstrap.feature_cap, cfg.seed,
                                                     cfg.bootstrap.feature_layer);
            const Codebook rnd = random_codebook(cfg.network.K_c, f.C, QuantizerName::collaborative, cfg.seed);
            std::ostringstream rep;
            rep << commented(cfg.echo()) << "harvested_vectors," << f.total_before_cap << "\nkept_vectors," << f.count()
                << "\nheld_out_error_kmeans," << format_real(mean_quantization_error(held, book))
                << "\nheld_out_error_random," << format_real(mean_quantization_error(held, rnd)) << '\n';
            write_file(fs::path(cb_out).replace_extension(".report.csv"), rep.str());
            std::cout << rep.str().substr(commented(cfg.echo()).size());
        } else if (*tr) {
            TrainConfig cfg = tr_cfg.load();
            if (!tr_init.empty()) cfg.init_collaborative = tr_init;
            const DataSplit data = load_split(cfg.data);
            const TrainResult r = train(cfg, data, tr_out, &std::cout);
            std::cout << "best val dsc " << r.best_val_dsc << " at epoch " << r.best_epoch << " (unregistered "
                      << r.unregistered_val_dsc << "), " << r.seconds << " s\n";
        } else if (*rg) {
            const Checkpoint ck = load_checkpoint(rg_ckpt);
            const TrainConfig ck_cfg = TrainConfig::from_doc(ConfigDoc::parse(ck.config_text));
            if (!rg_config.empty())
                require_same_network(ck_cfg.network, TrainConfig::from_doc(ConfigDoc::load(rg_config)).network);
            const RegModel<float> model = model_from_checkpoint(ck);
            RegistrationSample s;
            s.moving = load_any_volume(rg_moving);
            s.fixed = load_any_volume(rg_fixed);
            if (!(s.moving.dims() == ck_cfg.network.input_dims) || !(s.fixed.dims() == ck_cfg.network.input_dims))
                throw Error("register: volume dims " + to_string(s.moving.dims()) + " / " + to_string(s.fixed.dims()) +
                            " do not match the checkpoint's input dims " + to_string(ck_cfg.network.input_dims));
            const DisplacementField ddf = predict_ddf(model, s.moving, s.fixed);
            save_ddf(rg_ddf, ddf);
            const fs::path warped_path = rg_warped.empty() ? fs::path(rg_ddf).replace_extension(".warped.vol") : fs::path(rg_warped);
            save_volume(warped_path, resample(s.moving, ddf), DType::f64);
            write_file(fs::path(rg_ddf).replace_extension(".config.ini"), ck.config_text);
            std::cout << "mse " << mse(resample(s.moving, ddf), s.fixed) << '\n';
            if (!rg_mm.empty() && !rg_fm.empty()) {
                const MaskVolume mm = load_mask(rg_mm), fm = load_mask(rg_fm);
                const MaskVolume w = resample(mm, ddf, ResampleSpec{.mask_mode = MaskMode::threshold});
                std::cout << "dsc " << dsc(w, fm.thresholded()) << " (before " << dsc(mm.thresholded(), fm.thresholded())
                          << ")\ncd_mm " << centroid_distance(w, fm.thresholded()) << '\n';
            }
            if (!rg_ml.empty() && !rg_fl.empty()) {
                s.moving_landmarks = load_landmarks(rg_ml);
                s.fixed_landmarks = load_landmarks(rg_fl);
                std::cout << "tre_mm " << summarize(tre(s, ddf)).mean << '\n';
            }
            std::cout << "neg_jacobian_fraction " << neg_jacobian_fraction(ddf) << '\n';
        } else if (*ev) {
            const Checkpoint ck = load_checkpoint(ev_ckpt);
            const TrainConfig ck_cfg = TrainConfig::from_doc(ConfigDoc::parse(ck.config_text));
            const TrainConfig cfg = ev_cfg.load();
            require_same_network(ck_cfg.network, cfg.network);
            const RegModel<float> model = model_from_checkpoint(ck);
            const DataSplit data = load_split(cfg.data);
            const auto& samples = pick_split(data, ev_split);
            const EvalReport before = evaluate_unregistered(samples, ck.config_text);
            const EvalReport after = evaluate_model(model, samples, ck_cfg.network.enabled.label(), ck.config_text);
            write_file(fs::path(ev_out) / "report.csv", after.to_csv());
            write_file(fs::path(ev_out) / "unregistered.csv", before.to_csv());
            const std::string table = format_table({before, after});
            write_file(fs::path(ev_out) / "table.txt", table + "\n" + commented(ck.config_text));
            std::cout << table;
        } else if (*ab) {
            const TrainConfig cfg = ab_cfg.load();
            const DataSplit data = load_split(cfg.data);
            const ExperimentResult r = run_arms(cfg, ablation_arms(), data, ab_out, &std::cout);
            std::cout << r.table();
        } else if (*sw) {
            const TrainConfig cfg = sw_cfg.load();
            const DataSplit data = load_split(cfg.data);
            const ExperimentResult r = run_arms(cfg, dict_size_arms(sw_sizes), data, sw_out, &std::cout);
            std::cout << r.table();
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
