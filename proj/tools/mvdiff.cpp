// Command-line front end: dataset generation, training, sampling,
// autoregressive sweeps, evaluation, the analytic score-identity check and
// the backbone gradient check. Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mvdiff/autograd.hpp"
#include "mvdiff/backbone.hpp"
#include "mvdiff/checkpoint.hpp"
#include "mvdiff/composer.hpp"
#include "mvdiff/dataset.hpp"
#include "mvdiff/energy_oracle.hpp"
#include "mvdiff/gradcheck.hpp"
#include "mvdiff/image_io.hpp"
#include "mvdiff/metrics.hpp"
#include "mvdiff/sampler.hpp"
#include "mvdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace mvdiff;

namespace {

// Every run records its resolved configuration next to its outputs, so a
// rerun from the manifest reproduces them.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const nlohmann::json& args) {
    fs::create_directories(out_dir);
    nlohmann::json m;
    m["command"] = command;
    m["args"] = args;
    m["code_version"] = kVersion;
    m["threads"] = num_threads();
    std::ofstream f(fs::path(out_dir) / "run_manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write run manifest in " + out_dir);
    f << m.dump(2) << "\n";
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos <= s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        if (comma > pos) out.push_back(s.substr(pos, comma - pos));
        pos = comma + 1;
    }
    return out;
}

// Conditioning views from files and/or directories; paths are sorted
// lexicographically to fix the canonical stream order (in relative-pose
// terms, the first sorted file is the reference view).
std::vector<Tensor<float>> load_views(const std::vector<std::string>& specs) {
    std::vector<std::string> files;
    for (const auto& s : specs) {
        if (fs::is_directory(s)) {
            for (const auto& e : fs::directory_iterator(s)) {
                if (e.path().extension() == ".pgm" || e.path().extension() == ".ppm")
                    files.push_back(e.path().string());
            }
        } else {
            if (!fs::exists(s)) throw IoError("no such view file: " + s);
            files.push_back(s);
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no conditioning views found");
    std::vector<Tensor<float>> views;
    for (const auto& f : files) views.push_back(read_pnm(f));
    return views;
}

struct LoadedModel {
    ParamStore<float> store;
    DenoiserConfig config;
    NoiseSchedule<float> schedule;
    nlohmann::json meta;
};

LoadedModel load_model(const std::string& checkpoint_prefix) {
    LoadedModel m;
    m.meta = load_checkpoint(checkpoint_prefix, m.store);
    m.config = DenoiserConfig::from_json(m.meta.at("model"));
    const auto& s = m.meta.at("schedule");
    m.schedule = build_linear_schedule<float>(s.at("timesteps").get<int>(),
                                              s.at("beta_start").get<double>(),
                                              s.at("beta_end").get<double>());
    return m;
}

int run(int argc, char** argv) {
    CLI::App app{"multi-view composable-diffusion toolkit"};
    app.require_subcommand(1);
    int threads = static_cast<int>(std::thread::hardware_concurrency());
    app.add_option("--threads", threads, "worker threads for order-independent work");

    // ---- make-dataset ----
    auto* mk = app.add_subcommand("make-dataset", "generate the procedural multi-view dataset");
    DatasetConfig dcfg;
    std::string mk_out = "dataset";
    std::string mk_counts = "600,100,200";
    std::string mk_classes, mk_holdout;
    mk->add_option("--seed", dcfg.seed, "dataset seed");
    mk->add_option("--out", mk_out, "output directory")->required();
    mk->add_option("--objects-per-split", mk_counts, "train,val,test object counts");
    mk->add_option("--classes", mk_classes, "comma list of shape classes (default: all)");
    mk->add_option("--holdout", mk_holdout, "classes excluded from the train split");
    mk->add_option("--azimuths", dcfg.azimuths, "views per object (K)");
    mk->add_option("--resolution", dcfg.resolution, "image resolution");
    mk->add_option("--elevation-deg", dcfg.elevation_deg, "camera elevation in degrees");
    mk->add_option("--channels", dcfg.channels, "1 (grayscale) or 3");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train the denoiser");
    std::string tr_config, tr_data, tr_out = "run", tr_resume;
    tr->add_option("--config", tr_config, "train config JSON")->required();
    tr->add_option("--data", tr_data, "dataset root")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint prefix to resume from");

    // ---- sample ----
    auto* sa = app.add_subcommand("sample", "generate one view");
    std::string sa_ckpt, sa_out = "sample.pgm", sa_mode = "weighted", sa_pose = "canonical";
    std::vector<std::string> sa_views;
    double sa_angle = 0;
    std::uint64_t sa_seed = 0;
    bool sa_masks = false, sa_png = false;
    sa->add_option("--checkpoint", sa_ckpt, "checkpoint prefix")->required();
    sa->add_option("--views", sa_views, "view files or directories")->required();
    sa->add_option("--target-angle", sa_angle, "target angle in radians")->required();
    sa->add_option("--seed", sa_seed, "sampling seed");
    sa->add_option("--out", sa_out, "output image path (.pgm)");
    sa->add_flag("--masks", sa_masks, "also export per-view weight masks");
    sa->add_option("--mode", sa_mode, "weighted|averaged");
    sa->add_option("--pose", sa_pose, "canonical|relative (bookkeeping for the manifest)");
    sa->add_flag("--png", sa_png, "also write a PNG copy");

    // ---- sweep ----
    auto* sw = app.add_subcommand("sweep", "autoregressive ring sweep");
    std::string sw_ckpt, sw_out = "sweep", sw_mode = "weighted";
    std::vector<std::string> sw_views;
    double sw_step = 2.0 * kPi / 24.0, sw_start = 0;
    int sw_steps = 24;
    std::uint64_t sw_seed = 0;
    sw->add_option("--checkpoint", sw_ckpt)->required();
    sw->add_option("--views", sw_views, "initial view files or directories")->required();
    sw->add_option("--angle-step", sw_step, "angle increment per step (radians)");
    sw->add_option("--steps", sw_steps, "number of generated views");
    sw->add_option("--start-angle", sw_start, "angle of the initial view set");
    sw->add_option("--seed", sw_seed);
    sw->add_option("--out", sw_out, "output directory")->required();
    sw->add_option("--mode", sw_mode, "weighted|averaged");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate PSNR/SSIM over a split");
    std::string ev_ckpt, ev_data, ev_split = "test", ev_policy = "fixed:1", ev_out = "eval",
                ev_mode = "weighted", ev_pose = "canonical";
    int ev_repeats = 3, ev_max_objects = -1;
    std::uint64_t ev_seed = 0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--split", ev_split, "train|val|test");
    ev->add_option("--view-policy", ev_policy, "fixed:<n> | uniform:<vmax> | list:<k,k,...>");
    ev->add_option("--repeats", ev_repeats);
    ev->add_option("--seed", ev_seed);
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--max-objects", ev_max_objects, "cap object count (-1 = all)");
    ev->add_option("--mode", ev_mode, "weighted|averaged");
    ev->add_option("--pose", ev_pose, "canonical|relative");

    // ---- oracle ----
    auto* orc = app.add_subcommand("oracle", "verify the mixture-of-experts score identity");
    int orc_components = 5, orc_dim = 8, orc_samples = 1000, orc_mixtures = 100;
    double orc_threshold = 1e-10;
    std::uint64_t orc_seed = 0;
    orc->add_option("--components", orc_components, "max mixture components");
    orc->add_option("--dim", orc_dim, "max dimensionality");
    orc->add_option("--samples", orc_samples, "probe points per mixture");
    orc->add_option("--mixtures", orc_mixtures, "random mixtures to test");
    orc->add_option("--threshold", orc_threshold, "max allowed relative error");
    orc->add_option("--seed", orc_seed);

    // ---- gradcheck ----
    auto* gc = app.add_subcommand("gradcheck", "backbone finite-difference gradient suite");
    std::string gc_config;
    double gc_tol = 1e-6;
    gc->add_option("--config", gc_config, "model config JSON (default: tiny 8x8 base-8)");
    gc->add_option("--tolerance", gc_tol, "max allowed relative error (f64)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    set_num_threads(std::max(1, threads));

    if (*mk) {
        const auto counts = split_csv(mk_counts);
        require(counts.size() == 3, "--objects-per-split expects train,val,test");
        dcfg.train_objects = std::stoi(counts[0]);
        dcfg.val_objects = std::stoi(counts[1]);
        dcfg.test_objects = std::stoi(counts[2]);
        if (!mk_classes.empty()) dcfg.classes = split_csv(mk_classes);
        if (!mk_holdout.empty()) dcfg.holdout_classes = split_csv(mk_holdout);
        generate_dataset(dcfg, mk_out);
        write_run_manifest(mk_out, "make-dataset", dcfg.to_json());
        std::cout << "dataset written to " << mk_out << "\n";
        return 0;
    }

    if (*tr) {
        TrainConfig cfg = TrainConfig::from_file(tr_config);
        LoadedSplit train_split = load_split(tr_data, "train");
        LoadedSplit val_split = load_split(tr_data, "val");
        nlohmann::json args = cfg.to_json();
        args["data"] = tr_data;
        args["resume"] = tr_resume;
        write_run_manifest(tr_out, "train", args);
        TrainOutcome out = train<float>(cfg, train_split, &val_split, tr_out, tr_resume);
        std::cout << "final checkpoint: " << out.final_checkpoint
                  << "  loss: " << out.final_loss << "\n";
        return 0;
    }

    if (*sa) {
        LoadedModel m = load_model(sa_ckpt);
        UNet<float> unet(m.config);
        auto views = load_views(sa_views);
        SampleResult<float> r = sample(views, sa_angle, unet, m.store, m.schedule, sa_seed,
                                       compose_mode_from(sa_mode), sa_masks);
        const fs::path out_path(sa_out);
        if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
        write_pnm(sa_out, r.image);
        if (sa_png) write_png(out_path.string() + ".png", r.image);
        if (sa_masks) {
            const fs::path mask_dir = out_path.parent_path() / (out_path.stem().string() + "_masks");
            fs::create_directories(mask_dir);
            std::ofstream masses(mask_dir / "masses.csv", std::ios::trunc);
            masses << "view,mass\n";
            for (size_t i = 0; i < r.masks.size(); ++i) {
                Tensor<float> img({1, r.masks[i].dim(0), r.masks[i].dim(1)});
                for (std::int64_t k = 0; k < r.masks[i].numel(); ++k)
                    img[k] = r.masks[i][k] * 2.0f - 1.0f;  // [0,1] -> data range
                char buf[32];
                std::snprintf(buf, sizeof(buf), "mask_%02zu.pgm", i);
                write_pnm((mask_dir / buf).string(), img);
                masses << i << "," << r.masses[i] << "\n";
            }
        }
        nlohmann::json args{{"checkpoint", sa_ckpt}, {"target_angle", sa_angle},
                            {"seed", sa_seed},      {"mode", sa_mode},
                            {"pose", sa_pose},      {"masks", sa_masks},
                            {"out", sa_out}};
        const std::string mdir =
            out_path.has_parent_path() ? out_path.parent_path().string() : ".";
        write_run_manifest(mdir, "sample", args);
        std::cout << "wrote " << sa_out << "\n";
        return 0;
    }

    if (*sw) {
        LoadedModel m = load_model(sw_ckpt);
        UNet<float> unet(m.config);
        auto views = load_views(sw_views);
        auto seq = autoregressive_sweep(views, sw_start, sw_step, sw_steps, unet, m.store,
                                        m.schedule, sw_seed, compose_mode_from(sw_mode));
        fs::create_directories(sw_out);
        for (size_t k = 0; k < seq.size(); ++k) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "step_%03zu.pgm", k + 1);
            write_pnm((fs::path(sw_out) / buf).string(), seq[k]);
        }
        nlohmann::json args{{"checkpoint", sw_ckpt}, {"angle_step", sw_step},
                            {"steps", sw_steps},     {"start_angle", sw_start},
                            {"seed", sw_seed},       {"mode", sw_mode}};
        write_run_manifest(sw_out, "sweep", args);
        std::cout << "wrote " << seq.size() << " views to " << sw_out << "\n";
        return 0;
    }

    if (*ev) {
        LoadedModel m = load_model(ev_ckpt);
        UNet<float> unet(m.config);
        LoadedSplit split = load_split(ev_data, ev_split);
        const ViewPolicy policy = ViewPolicy::parse(ev_policy);
        const ComposeMode mode = compose_mode_from(ev_mode);
        EvalReport rep = evaluate(
            split, policy, ev_repeats, ev_seed, pose_mode_from(ev_pose),
            [&](const std::vector<Tensor<float>>& views, double psi, std::uint64_t s) {
                return sample(views, psi, unet, m.store, m.schedule, s, mode).image;
            },
            ev_max_objects);
        fs::create_directories(ev_out);
        std::ofstream csv(fs::path(ev_out) / "eval_report.csv", std::ios::trunc);
        csv << "repeat,psnr,ssim\n";
        for (int r = 0; r < rep.repeats; ++r)
            csv << r << "," << rep.psnr_per_repeat[static_cast<size_t>(r)] << ","
                << rep.ssim_per_repeat[static_cast<size_t>(r)] << "\n";
        csv << "mean," << rep.mean_psnr << "," << rep.mean_ssim << "\n";
        nlohmann::json args{{"checkpoint", ev_ckpt}, {"split", ev_split},
                            {"view_policy", ev_policy}, {"repeats", ev_repeats},
                            {"seed", ev_seed},      {"mode", ev_mode},
                            {"pose", ev_pose},      {"max_objects", ev_max_objects}};
        write_run_manifest(ev_out, "eval", args);
        std::cout << "objects=" << rep.objects << " repeats=" << rep.repeats
                  << "  mean PSNR=" << rep.mean_psnr << " dB  mean SSIM=" << rep.mean_ssim
                  << "\n";
        return 0;
    }

    if (*orc) {
        Rng rng(orc_seed);
        double worst = 0;
        for (int i = 0; i < orc_mixtures; ++i) {
            const int n = 1 + static_cast<int>(rng.uniform_below(
                                  static_cast<std::uint64_t>(orc_components)));
            const int d =
                1 + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(orc_dim)));
            GaussianMixture m = GaussianMixture::random(rng, n, d, true);
            worst = std::max(worst, verify_identity(m, orc_samples, rng));
        }
        std::cout << "max relative error over " << orc_mixtures
                  << " mixtures: " << worst << " (threshold " << orc_threshold << ")\n";
        if (!(worst < orc_threshold)) {
            std::cerr << "FAIL: identity error above threshold\n";
            return 4;
        }
        std::cout << "PASS\n";
        return 0;
    }

    if (*gc) {
        DenoiserConfig cfg;
        cfg.resolution = 8;
        cfg.base_channels = 8;
        cfg.depth = 1;
        cfg.blocks_per_level = 2;
        cfg.embed_dim = 8;
        cfg.groupnorm_groups = 4;
        if (!gc_config.empty()) {
            std::ifstream f(gc_config);
            if (!f) throw IoError("cannot open " + gc_config);
            nlohmann::json j;
            f >> j;
            cfg = DenoiserConfig::from_json(j.contains("model") ? j.at("model") : j);
        }
        UNet<double> unet(cfg);
        ParamStore<double> store;
        Rng rng(11);
        unet.init_params(store, rng);
        const double err = backbone_gradcheck(unet, store, rng);
        std::cout << "params=" << store.num_params() << "  max rel err=" << err
                  << " (tolerance " << gc_tol << ")\n";
        if (!(err < gc_tol)) {
            std::cerr << "FAIL: gradient error above tolerance\n";
            return 4;
        }
        std::cout << "PASS\n";
        return 0;
    }
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
