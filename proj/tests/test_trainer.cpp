#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mvdiff/trainer.hpp"

using namespace mvdiff;
namespace fs = std::filesystem;

namespace {

DenoiserConfig small_model(int res = 8, int base = 8) {
    DenoiserConfig cfg;
    cfg.image_channels = 1;
    cfg.resolution = res;
    cfg.base_channels = base;
    cfg.depth = 2;
    cfg.blocks_per_level = 1;
    cfg.embed_dim = 8;
    cfg.groupnorm_groups = 4;
    return cfg;
}

std::vector<TrainingTuple> random_batch(Rng& rng, int batch, int res, int v_max) {
    std::vector<TrainingTuple> out;
    for (int b = 0; b < batch; ++b) {
        TrainingTuple t;
        const int n = rng.uniform_int(1, v_max);
        for (int i = 0; i < n; ++i) t.views.push_back(Tensor<float>::randn({1, res, res}, rng));
        t.target = Tensor<float>::randn({1, res, res}, rng);
        t.delta_psi = rng.uniform() * 2.0 * kPi;
        out.push_back(std::move(t));
    }
    return out;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("mvdiff_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Model that replays the trainer's RNG draws to return the exact noise the
// step will test against; the loss must then be zero.
struct OracleModel {
    DenoiserConfig cfg;
    std::vector<std::pair<Tensor<float>, Tensor<float>>> yt_to_eps;  // (y_t, eps)

    const DenoiserConfig& config() const { return cfg; }

    typename Graph<float>::Val embed(Graph<float>& g, ParamStore<float>&,
                                     const std::vector<std::pair<double, int>>& psi_t) const {
        return g.input(Tensor<float>::zeros({static_cast<int>(psi_t.size()), 1}));
    }

    std::pair<typename Graph<float>::Val, typename Graph<float>::Val> forward(
        Graph<float>& g, ParamStore<float>&, typename Graph<float>::Val x,
        typename Graph<float>::Val) const {
        const Tensor<float>& xv = g.value(x);
        const int s = xv.dim(0), res = cfg.resolution;
        const std::int64_t plane = static_cast<std::int64_t>(res) * res;
        Tensor<float> eps({s, 1, res, res});
        for (int i = 0; i < s; ++i) {
            const float* yt = xv.data() + (static_cast<std::int64_t>(i) * 2 + 1) * plane;
            bool found = false;
            for (const auto& [key, value] : yt_to_eps) {
                if (std::equal(yt, yt + plane, key.data())) {
                    std::copy_n(value.data(), plane, eps.data() + i * plane);
                    found = true;
                    break;
                }
            }
            REQUIRE(found);
        }
        return {g.input(eps), g.input(Tensor<float>::zeros({s, 1, res, res}))};
    }
};

}  // namespace

TEST_CASE("learning-rate schedule: endpoints and midpoint", "[trainer]") {
    TrainConfig cfg;
    cfg.warmup_steps = 10000;
    CHECK(lr_schedule(cfg, 0) == 5e-5);
    CHECK(lr_schedule(cfg, 10000) == 1e-4);
    CHECK(lr_schedule(cfg, 20000) == 1e-4);
    CHECK(lr_schedule(cfg, 5000) == Catch::Approx(7.5e-5).epsilon(1e-12));
    CHECK_THROWS_AS(lr_schedule(cfg, -1), InvalidArgument);
}

TEST_CASE("initial loss is ~1 with the zero-initialized head", "[trainer]") {
    DenoiserConfig mc = small_model();
    UNet<float> unet(mc);
    ParamStore<float> store;
    Rng init(3);
    unet.init_params(store, init);
    auto schedule = build_linear_schedule<float>(50, 1e-4, 0.02);
    Rng rng(9);
    auto batch = random_batch(rng, 64, 8, 4);
    AdamConfig adam;
    StepResult<float> r =
        training_step(unet, store, schedule, batch, rng, ComposeMode::weighted, adam, false);
    CHECK(r.loss > 0.9f);
    CHECK(r.loss < 1.1f);
}

TEST_CASE("oracle model that returns the true noise yields zero loss", "[trainer]") {
    OracleModel oracle;
    oracle.cfg = small_model();
    auto schedule = build_linear_schedule<float>(50, 1e-4, 0.02);
    Rng data_rng(21);
    auto batch = random_batch(data_rng, 4, 8, 3);

    // replay the documented draw order (t, then eps) to precompute (y_t, eps)
    Rng replay = data_rng;
    for (const auto& tup : batch) {
        const int t = replay.uniform_int(1, schedule.steps);
        Tensor<float> eps = Tensor<float>::randn({1, 8, 8}, replay);
        Tensor<float> y0 = tup.target;
        Tensor<float> yt = forward_noise(y0, t, eps, schedule);
        oracle.yt_to_eps.emplace_back(std::move(yt), std::move(eps));
    }
    ParamStore<float> store;
    AdamConfig adam;
    StepResult<float> r = training_step<float, OracleModel>(oracle, store, schedule, batch,
                                                            data_rng, ComposeMode::weighted, adam,
                                                            false);
    CHECK(r.loss == 0.0f);
}

TEST_CASE("averaged equals weighted when all logits are equal", "[trainer]") {
    DenoiserConfig mc = small_model();
    UNet<float> unet(mc);
    ParamStore<float> store;
    Rng init(5);
    unet.init_params(store, init);  // zero head -> all logits equal
    auto schedule = build_linear_schedule<float>(50, 1e-4, 0.02);
    Rng data_rng(31);
    auto batch = random_batch(data_rng, 6, 8, 4);
    AdamConfig adam;
    Rng r1(77), r2(77);
    StepResult<float> w =
        training_step(unet, store, schedule, batch, r1, ComposeMode::weighted, adam, false);
    StepResult<float> a =
        training_step(unet, store, schedule, batch, r2, ComposeMode::averaged, adam, false);
    CHECK(std::abs(w.loss - a.loss) <= 1e-6f * std::max(1.0f, std::abs(w.loss)));
}

TEST_CASE("loss is exactly permutation invariant in the conditioning views", "[trainer]") {
    DenoiserConfig mc = small_model();
    UNet<float> unet(mc);
    ParamStore<float> store;
    Rng init(7);
    unet.init_params(store, init);
    // give the heads nonzero weights so logits actually vary
    Rng noise(8);
    for (const auto& name : store.names())
        for (std::int64_t i = 0; i < store.value(name).numel(); ++i)
            store.value(name)[i] += static_cast<float>(0.05 * noise.gaussian());

    auto schedule = build_linear_schedule<float>(50, 1e-4, 0.02);
    Rng data_rng(41);
    auto batch = random_batch(data_rng, 3, 8, 4);
    AdamConfig adam;

    Rng ra(55), rb(55);
    StepResult<float> base =
        training_step(unet, store, schedule, batch, ra, ComposeMode::weighted, adam, false);

    auto permuted = batch;
    Rng shuffler(1);
    for (auto& tup : permuted) shuffler.shuffle(tup.views.begin(), tup.views.end());
    StepResult<float> perm =
        training_step(unet, store, schedule, permuted, rb, ComposeMode::weighted, adam, false);
    CHECK(base.loss == perm.loss);
    CHECK(base.per_sample == perm.per_sample);
}

TEST_CASE("variable-length batching matches per-sample processing bitwise", "[trainer]") {
    DenoiserConfig mc = small_model();
    UNet<float> unet(mc);
    ParamStore<float> store;
    Rng init(13);
    unet.init_params(store, init);
    Rng noise(14);
    for (const auto& name : store.names())
        for (std::int64_t i = 0; i < store.value(name).numel(); ++i)
            store.value(name)[i] += static_cast<float>(0.05 * noise.gaussian());

    auto schedule = build_linear_schedule<float>(50, 1e-4, 0.02);
    Rng data_rng(51);
    auto batch = random_batch(data_rng, 5, 8, 4);  // mixes view counts
    AdamConfig adam;

    Rng ra(66), rb(66);
    StepResult<float> mixed =
        training_step(unet, store, schedule, batch, ra, ComposeMode::weighted, adam, false);
    std::vector<float> single;
    for (const auto& tup : batch) {
        StepResult<float> r = training_step(unet, store, schedule, {tup}, rb,
                                            ComposeMode::weighted, adam, false);
        single.push_back(r.per_sample[0]);
    }
    CHECK(mixed.per_sample == single);
}

TEST_CASE("train config: file round trip, unknown keys rejected", "[trainer]") {
    TrainConfig cfg;
    cfg.total_steps = 123;
    cfg.model = small_model();
    nlohmann::json j = cfg.to_json();
    TrainConfig back = TrainConfig::from_json(j);
    CHECK(back.total_steps == 123);
    CHECK(back.model.base_channels == 8);

    j["mystery_knob"] = 1;
    CHECK_THROWS_AS(TrainConfig::from_json(j), InvalidArgument);

    nlohmann::json bad = {{"lr_start", 2e-4}, {"lr_peak", 1e-4}};
    CHECK_THROWS_AS(TrainConfig::from_json(bad), InvalidArgument);
}

namespace {

TrainConfig smoke_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.model = small_model(16, 8);
    cfg.model.depth = 2;
    cfg.v_max = 3;
    cfg.batch_size = 4;
    cfg.total_steps = 200;
    cfg.warmup_steps = 50;
    cfg.timesteps = 50;
    cfg.seed = seed;
    cfg.validation_every = 0;  // keep the smoke run fast
    cfg.checkpoint_every = 0;
    return cfg;
}

DatasetConfig smoke_dataset() {
    DatasetConfig d;
    d.seed = 17;
    d.train_objects = 10;
    d.val_objects = 2;
    d.test_objects = 2;
    d.azimuths = 8;
    d.resolution = 16;
    return d;
}

}  // namespace

TEST_CASE("smoke training run: loss decreases over 200 steps", "[trainer][slow]") {
    const fs::path data = temp_dir("smoke_data");
    generate_dataset(smoke_dataset(), data.string());
    LoadedSplit train_split = load_split(data.string(), "train");

    const fs::path out = temp_dir("smoke_out");
    TrainConfig cfg = smoke_config(99);
    TrainOutcome res = train<float>(cfg, train_split, nullptr, out.string());
    CHECK(res.steps_run == 200);

    // compare the first logged loss against the last
    std::ifstream csv(out / "metrics.csv");
    REQUIRE(csv);
    std::string line;
    std::getline(csv, line);  // header
    double first_loss = -1, last_loss = -1;
    while (std::getline(csv, line)) {
        const size_t c1 = line.find(',');
        const size_t c2 = line.find(',', c1 + 1);
        const double loss = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
        if (first_loss < 0) first_loss = loss;
        last_loss = loss;
    }
    CHECK(first_loss > 0);
    CHECK(last_loss < first_loss);
}

TEST_CASE("zero-step training emits only the initial checkpoint", "[trainer]") {
    const fs::path data = temp_dir("zero_data");
    DatasetConfig d = smoke_dataset();
    d.train_objects = 2;
    generate_dataset(d, data.string());
    LoadedSplit train_split = load_split(data.string(), "train");

    const fs::path out = temp_dir("zero_out");
    TrainConfig cfg = smoke_config(1);
    cfg.total_steps = 0;
    TrainOutcome res = train<float>(cfg, train_split, nullptr, out.string());
    CHECK(res.steps_run == 0);
    CHECK(fs::exists(out / "ckpt_00000000.json"));
    CHECK(fs::exists(out / "ckpt_00000000.bin"));
    int ckpts = 0;
    for (const auto& e : fs::directory_iterator(out))
        if (e.path().extension() == ".bin") ++ckpts;
    CHECK(ckpts == 1);
}

TEST_CASE("resume reproduces an uninterrupted run bitwise", "[trainer][slow]") {
    const fs::path data = temp_dir("resume_data");
    DatasetConfig d = smoke_dataset();
    d.train_objects = 4;
    generate_dataset(d, data.string());
    LoadedSplit train_split = load_split(data.string(), "train");

    TrainConfig cfg = smoke_config(12345);
    cfg.total_steps = 6;
    cfg.checkpoint_every = 3;

    const fs::path full = temp_dir("resume_full");
    train<float>(cfg, train_split, nullptr, full.string());

    const fs::path split_run = temp_dir("resume_split");
    TrainConfig half = cfg;
    half.total_steps = 3;
    train<float>(half, train_split, nullptr, split_run.string());
    TrainConfig rest = cfg;  // continue to step 6
    train<float>(rest, train_split, nullptr, split_run.string(),
                 (split_run / "ckpt_00000003").string());

    const auto bytes = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        REQUIRE(f);
        return std::vector<char>((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
    };
    CHECK(bytes(full / "ckpt_00000006.bin") == bytes(split_run / "ckpt_00000006.bin"));
}
