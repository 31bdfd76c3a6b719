#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvdiff/autograd.hpp"
#include "mvdiff/backbone.hpp"
#include "mvdiff/checkpoint.hpp"
#include "mvdiff/composer.hpp"
#include "mvdiff/dataset.hpp"
#include "mvdiff/metrics.hpp"
#include "mvdiff/sampler.hpp"
#include "mvdiff/schedule.hpp"

namespace mvdiff {

struct TrainConfig {
    int v_max = 6;
    int batch_size = 16;
    int total_steps = 20000;
    double lr_start = 5e-5;
    double lr_peak = 1e-4;
    int warmup_steps = 1000;
    int timesteps = 500;
    double beta_start = 1e-6;
    double beta_end = 0.01;
    std::uint64_t seed = 0;
    std::string composition = "weighted";
    std::string pose = "canonical";
    int validation_every = 1000;
    int validation_objects = 8;
    int checkpoint_every = 5000;
    DenoiserConfig model;

    void validate() const {
        require(v_max >= 1 && batch_size >= 1 && total_steps >= 0, "train config: sizes");
        require(lr_start <= lr_peak && lr_start > 0, "train config: need 0 < lr_start <= lr_peak");
        require(warmup_steps >= 1, "train config: warmup_steps >= 1");
        require(timesteps >= 1, "train config: timesteps >= 1");
        compose_mode_from(composition);
        pose_mode_from(pose);
        model.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"v_max", v_max},
                            {"batch_size", batch_size},
                            {"total_steps", total_steps},
                            {"lr_start", lr_start},
                            {"lr_peak", lr_peak},
                            {"warmup_steps", warmup_steps},
                            {"timesteps", timesteps},
                            {"beta_start", beta_start},
                            {"beta_end", beta_end},
                            {"seed", seed},
                            {"composition", composition},
                            {"pose", pose},
                            {"validation_every", validation_every},
                            {"validation_objects", validation_objects},
                            {"checkpoint_every", checkpoint_every}};
        j["model"] = model.to_json();
        return j;
    }

    // Unknown keys are rejected; known keys override the defaults.
    static TrainConfig from_json(const nlohmann::json& j) {
        static const std::set<std::string> known = {
            "v_max",      "batch_size", "total_steps",      "lr_start",
            "lr_peak",    "warmup_steps", "timesteps",      "beta_start",
            "beta_end",   "seed",       "composition",      "pose",
            "validation_every", "validation_objects", "checkpoint_every", "model"};
        for (const auto& [key, v] : j.items())
            if (!known.contains(key)) throw InvalidArgument("train config: unknown key '" + key + "'");
        TrainConfig c;
        c.v_max = j.value("v_max", c.v_max);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.total_steps = j.value("total_steps", c.total_steps);
        c.lr_start = j.value("lr_start", c.lr_start);
        c.lr_peak = j.value("lr_peak", c.lr_peak);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.timesteps = j.value("timesteps", c.timesteps);
        c.beta_start = j.value("beta_start", c.beta_start);
        c.beta_end = j.value("beta_end", c.beta_end);
        c.seed = j.value("seed", c.seed);
        c.composition = j.value("composition", c.composition);
        c.pose = j.value("pose", c.pose);
        c.validation_every = j.value("validation_every", c.validation_every);
        c.validation_objects = j.value("validation_objects", c.validation_objects);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        if (j.contains("model")) c.model = DenoiserConfig::from_json(j.at("model"));
        c.validate();
        return c;
    }

    static TrainConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open config " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("config parse error: " + std::string(e.what()));
        }
        return from_json(j);
    }
};

// Linear warmup from lr_start to lr_peak at warmup_steps, constant after.
inline double lr_schedule(const TrainConfig& cfg, std::int64_t step) {
    require(step >= 0, "lr_schedule: step >= 0");
    if (step >= cfg.warmup_steps) return cfg.lr_peak;
    const double f = static_cast<double>(step) / cfg.warmup_steps;
    return cfg.lr_start + f * (cfg.lr_peak - cfg.lr_start);
}

template <typename T>
struct StepResult {
    T loss = T(0);
    std::vector<T> per_sample;  // per-sample mean squared error
};

// One Algorithm-1 step on a batch of tuples: per sample draw t and eps, noise
// the target, run every stream (all streams of the batch as one model batch),
// softmax-normalize the weight logits per sample, compose, and take a single
// Adam step on the mean squared error between eps and the composition.
// Draw order per sample (t, then eps elements) is fixed for reproducibility.
// Model is anything with the UNet surface (config/embed/forward); tests
// substitute oracle models here.
template <typename T, typename Model = UNet<T>>
StepResult<T> training_step(const Model& unet, ParamStore<T>& store,
                            const NoiseSchedule<T>& schedule,
                            const std::vector<TrainingTuple>& batch, Rng& rng, ComposeMode mode,
                            const AdamConfig& adam, bool apply_update = true) {
    require(!batch.empty(), "training_step: empty batch");
    const DenoiserConfig& cfg = unet.config();
    const int c = cfg.image_channels, res = cfg.resolution;
    const std::int64_t plane = static_cast<std::int64_t>(c) * res * res;

    struct SampleDraw {
        int t = 1;
        Tensor<T> eps, y_t;
        std::vector<int> order;
        int offset = 0, n = 0;
    };
    std::vector<SampleDraw> draws(batch.size());
    int total_streams = 0;
    for (size_t b = 0; b < batch.size(); ++b) {
        const TrainingTuple& tup = batch[b];
        require(!tup.views.empty(), "training_step: tuple without views");
        SampleDraw& d = draws[b];
        d.t = rng.uniform_int(1, schedule.steps);
        d.eps = Tensor<T>::randn({c, res, res}, rng);
        Tensor<T> y0({c, res, res});
        for (std::int64_t k = 0; k < plane; ++k) y0[k] = static_cast<T>(tup.target[k]);
        d.y_t = forward_noise(y0, d.t, d.eps, schedule);
        d.order = canonical_view_order(tup.views);
        d.offset = total_streams;
        d.n = static_cast<int>(tup.views.size());
        total_streams += d.n;
    }

    Graph<T> g;
    Tensor<T> x({total_streams, 2 * c, res, res});
    std::vector<std::pair<double, int>> psi_t;
    psi_t.reserve(static_cast<size_t>(total_streams));
    for (size_t b = 0; b < batch.size(); ++b) {
        const SampleDraw& d = draws[b];
        for (int i = 0; i < d.n; ++i) {
            const Tensor<float>& src = batch[b].views[static_cast<size_t>(d.order[i])];
            T* row = x.data() + (static_cast<std::int64_t>(d.offset) + i) * 2 * plane;
            for (std::int64_t k = 0; k < plane; ++k) row[k] = static_cast<T>(src[k]);
            std::copy_n(d.y_t.data(), plane, row + plane);
            psi_t.emplace_back(batch[b].delta_psi, d.t);
        }
    }

    typename Graph<T>::Val xv = g.input(std::move(x));
    typename Graph<T>::Val emb = unet.embed(g, store, psi_t);
    auto [eps_all, logits_all] = unet.forward(g, store, xv, emb);

    typename Graph<T>::Val total;
    StepResult<T> result;
    for (size_t b = 0; b < batch.size(); ++b) {
        const SampleDraw& d = draws[b];
        auto eps_b = g.slice_rows(eps_all, d.offset, d.offset + d.n);
        auto logits_b = g.slice_rows(logits_all, d.offset, d.offset + d.n);
        typename Graph<T>::Val comp;
        if (mode == ComposeMode::weighted) {
            auto w = g.softmax_axis0(logits_b);
            comp = g.sum_axis0(g.mul(w, eps_b));
        } else {
            comp = g.scale(g.sum_axis0(eps_b), T(1) / static_cast<T>(d.n));
        }
        auto eps_in = g.input(d.eps);
        auto diff = g.sub(eps_in, comp);
        auto ssq = g.sum_all(g.mul(diff, diff));
        result.per_sample.push_back(g.value(ssq)[0] / static_cast<T>(plane));
        total = (b == 0) ? ssq : g.add(total, ssq);
    }
    auto loss = g.scale(total, T(1) / static_cast<T>(batch.size() * plane));
    const T loss_value = g.value(loss)[0];
    if (!std::isfinite(loss_value)) throw NumericError("training_step: non-finite loss");
    result.loss = loss_value;

    if (apply_update) {
        store.zero_grad();
        g.backward(loss);
        store.mark_grads_populated();
        store.adam_step(adam);
    }
    return result;
}

struct TrainOutcome {
    std::string final_checkpoint;
    double final_loss = 0;
    std::int64_t steps_run = 0;
};

namespace detail {

inline std::string ckpt_name(const std::string& out_dir, std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%08lld", static_cast<long long>(step));
    return (std::filesystem::path(out_dir) / buf).string();
}

}  // namespace detail

// Full training loop: deterministic given the config seed (single RNG with a
// fixed draw order), periodic validation PSNR/SSIM via the sampler, numbered
// checkpoints that carry optimizer state and the RNG state so a resumed run
// is bitwise identical to an uninterrupted one.
template <typename T>
TrainOutcome train(const TrainConfig& cfg, const LoadedSplit& train_split,
                   const LoadedSplit* val_split, const std::string& out_dir,
                   const std::string& resume_prefix = "") {
    namespace fs = std::filesystem;
    cfg.validate();
    require(cfg.v_max <= train_split.azimuths, "train: V_max exceeds dataset azimuth count");
    require(train_split.resolution == cfg.model.resolution &&
                train_split.channels == cfg.model.image_channels,
            "train: dataset does not match model resolution/channels");
    fs::create_directories(out_dir);

    const NoiseSchedule<T> schedule =
        build_linear_schedule<T>(cfg.timesteps, cfg.beta_start, cfg.beta_end);
    const ComposeMode mode = compose_mode_from(cfg.composition);
    const PoseMode pose = pose_mode_from(cfg.pose);
    UNet<T> unet(cfg.model);

    ParamStore<T> store;
    Rng rng = Rng::substream(cfg.seed, "train");
    std::int64_t start_step = 0;
    if (resume_prefix.empty()) {
        Rng init_rng = Rng::substream(cfg.seed, "init");
        unet.init_params(store, init_rng);
    } else {
        nlohmann::json meta = load_checkpoint(resume_prefix, store);
        start_step = meta.at("train_step").get<std::int64_t>();
        rng.deserialize(meta.at("rng_state").get<std::string>());
    }

    const auto save = [&](std::int64_t step) {
        nlohmann::json meta;
        meta["train_step"] = step;
        meta["rng_state"] = rng.serialize();
        meta["schedule"] = {{"timesteps", cfg.timesteps},
                            {"beta_start", cfg.beta_start},
                            {"beta_end", cfg.beta_end}};
        meta["model"] = cfg.model.to_json();
        meta["train_config"] = cfg.to_json();
        const std::string prefix = detail::ckpt_name(out_dir, step);
        save_checkpoint(prefix, store, meta, true);
        return prefix;
    };

    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    std::ofstream csv;
    if (resume_prefix.empty()) {
        csv.open(metrics_path, std::ios::trunc);
        csv << "step,loss,lr,val_psnr,val_ssim\n";
    } else {
        csv.open(metrics_path, std::ios::app);
    }
    if (!csv) throw IoError("cannot write " + metrics_path);

    std::string last_ckpt = save(start_step);
    double last_loss = 0;

    const auto validate_now = [&](std::int64_t step) -> std::pair<double, double> {
        if (!val_split) return {0, 0};
        const std::uint64_t vseed =
            mvdiff::detail::splitmix64(cfg.seed ^ mvdiff::detail::fnv1a64("val")) +
            static_cast<std::uint64_t>(step);
        ViewPolicy policy;
        policy.kind = ViewPolicy::Kind::fixed;
        policy.n = 1;
        EvalReport rep = evaluate(
            *val_split, policy, 1, vseed, pose,
            [&](const std::vector<Tensor<float>>& views, double psi, std::uint64_t s) {
                return sample(views, psi, unet, store, schedule, s, mode).image.to_f32();
            },
            cfg.validation_objects);
        return {rep.mean_psnr, rep.mean_ssim};
    };

    const int n_obj = static_cast<int>(train_split.objects.size());
    for (std::int64_t step = start_step; step < cfg.total_steps; ++step) {
        std::vector<TrainingTuple> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int oi = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(n_obj)));
            batch.push_back(
                sample_training_tuple(rng, train_split.objects[static_cast<size_t>(oi)],
                                      cfg.v_max, pose));
        }
        AdamConfig adam;
        adam.lr = lr_schedule(cfg, step);
        StepResult<T> sr = training_step(unet, store, schedule, batch, rng, mode, adam);
        last_loss = static_cast<double>(sr.loss);

        const std::int64_t done = step + 1;
        const bool do_val = cfg.validation_every > 0 && (done % cfg.validation_every == 0);
        csv << done << "," << last_loss << "," << adam.lr;
        if (do_val) {
            const auto [vp, vs] = validate_now(done);
            csv << "," << vp << "," << vs << "\n";
        } else {
            csv << ",,\n";
        }
        csv.flush();

        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps)
            last_ckpt = save(done);
    }
    if (cfg.total_steps > start_step) last_ckpt = save(cfg.total_steps);

    TrainOutcome out;
    out.final_checkpoint = last_ckpt;
    out.final_loss = last_loss;
    out.steps_run = cfg.total_steps - start_step;
    return out;
}

}  // namespace mvdiff
