#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

// End-to-end checks of the command-line tool: exit codes, artifacts on disk,
// byte-level determinism of sampling.

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MVDIFF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f);
    return std::vector<char>((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
}

fs::path work_dir() {
    static fs::path p = [] {
        fs::path d = fs::temp_directory_path() / "mvdiff_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return p;
}

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
    CHECK(run_cli("") == 2);
    CHECK(run_cli("no-such-command") == 2);
    CHECK(run_cli("sample --bogus-flag 1") == 2);
}

TEST_CASE("missing input files exit with code 3", "[cli]") {
    CHECK(run_cli("train --config /nonexistent.json --data /nonexistent --out " +
                  (work_dir() / "x").string()) == 3);
    CHECK(run_cli("sample --checkpoint /nonexistent/ck --views /nonexistent.pgm "
                  "--target-angle 0 --out " + (work_dir() / "x.pgm").string()) == 3);
}

TEST_CASE("oracle subcommand verifies the identity and exits 0", "[cli]") {
    CHECK(run_cli("oracle --components 3 --dim 4 --samples 200 --mixtures 20 "
                  "--threshold 1e-10") == 0);
    // an absurd threshold fails with the numeric exit code
    CHECK(run_cli("oracle --components 3 --dim 4 --samples 50 --mixtures 5 "
                  "--threshold 1e-30") == 4);
}

TEST_CASE("end-to-end: make-dataset, train, sample, sweep, eval, gradcheck", "[cli][slow]") {
    const fs::path base = work_dir();
    const fs::path data = base / "data";
    CHECK(run_cli("make-dataset --seed 3 --out " + data.string() +
                  " --objects-per-split 6,2,3 --azimuths 8 --resolution 16") == 0);
    CHECK(fs::exists(data / "manifest.json"));
    CHECK(fs::exists(data / "train" / "obj_000000" / "view_00.pgm"));

    // tiny training configuration
    const fs::path cfg_path = base / "train.json";
    {
        std::ofstream cfg(cfg_path);
        cfg << R"({
  "v_max": 3, "batch_size": 2, "total_steps": 3, "warmup_steps": 2,
  "timesteps": 6, "seed": 5, "validation_every": 0, "checkpoint_every": 0,
  "model": {"image_channels": 1, "resolution": 16, "base_channels": 8,
             "depth": 2, "blocks_per_level": 1, "embed_dim": 8,
             "groupnorm_groups": 4}
})";
    }
    const fs::path run = base / "run";
    CHECK(run_cli("train --config " + cfg_path.string() + " --data " + data.string() +
                  " --out " + run.string()) == 0);
    const std::string ckpt = (run / "ckpt_00000003").string();
    CHECK(fs::exists(ckpt + ".json"));
    CHECK(fs::exists(run / "metrics.csv"));
    CHECK(fs::exists(run / "run_manifest.json"));

    // sampling twice with one seed gives byte-identical output
    const std::string view = (data / "test" / "obj_000008" / "view_00.pgm").string();
    const fs::path s1 = base / "s1.pgm";
    const fs::path s2 = base / "s2.pgm";
    CHECK(run_cli("sample --checkpoint " + ckpt + " --views " + view +
                  " --target-angle 0.785 --seed 7 --out " + s1.string()) == 0);
    CHECK(run_cli("sample --checkpoint " + ckpt + " --views " + view +
                  " --target-angle 0.785 --seed 7 --out " + s2.string() + " --masks --png") == 0);
    CHECK(slurp(s1) == slurp(s2));
    CHECK(fs::exists(base / "s2_masks" / "mask_00.pgm"));
    CHECK(fs::exists(base / "s2_masks" / "masses.csv"));
    CHECK(fs::exists(s2.string() + ".png"));

    // sweep produces one image per step
    const fs::path sweep_dir = base / "sweep";
    CHECK(run_cli("sweep --checkpoint " + ckpt + " --views " + view +
                  " --angle-step 0.785 --steps 2 --seed 1 --out " + sweep_dir.string()) == 0);
    CHECK(fs::exists(sweep_dir / "step_001.pgm"));
    CHECK(fs::exists(sweep_dir / "step_002.pgm"));

    // eval writes the per-repeat report
    const fs::path eval_dir = base / "eval";
    CHECK(run_cli("eval --checkpoint " + ckpt + " --data " + data.string() +
                  " --split test --view-policy fixed:1 --repeats 3 --seed 2 --out " +
                  eval_dir.string()) == 0);
    std::ifstream rep(eval_dir / "eval_report.csv");
    REQUIRE(rep);
    std::string line;
    int rows = 0;
    while (std::getline(rep, line)) ++rows;
    CHECK(rows == 5);  // header + 3 repeats + mean

    // gradcheck on the default tiny config
    CHECK(run_cli("gradcheck") == 0);
}
