#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvdiff/image_io.hpp"
#include "mvdiff/raster.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff {

enum class PoseMode { canonical, relative };

inline const char* pose_mode_name(PoseMode m) {
    return m == PoseMode::canonical ? "canonical" : "relative";
}
inline PoseMode pose_mode_from(const std::string& s) {
    if (s == "canonical") return PoseMode::canonical;
    if (s == "relative") return PoseMode::relative;
    throw InvalidArgument("unknown pose mode '" + s + "'");
}

inline const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> names = {"cuboid", "pyramid", "prism", "l_solid",
                                                   "cylinder"};
    return names;
}

// Geometry is a pure function of (dataset seed, object_id); face albedos and
// dimensions come from the object's own substream.
struct SceneObject {
    int object_id = 0;
    int class_id = 0;
    std::uint64_t geom_seed = 0;
};

inline Mesh build_object_mesh(const SceneObject& obj) {
    Rng rng(obj.geom_seed);
    const auto albedo = [&]() {
        std::array<double, 3> a;
        for (auto& v : a) v = 0.25 + 0.7 * rng.uniform();
        return a;
    };
    const auto albedos = [&](int n) {
        FaceAlbedos f;
        for (int i = 0; i < n; ++i) f.push_back(albedo());
        return f;
    };
    const auto dim = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
    switch (obj.class_id) {
        case 0:
            return make_box(dim(0.25, 0.45), dim(0.25, 0.45), dim(0.25, 0.45), albedos(6));
        case 1:
            return make_pyramid(dim(0.3, 0.45), dim(0.5, 0.8), albedos(5));
        case 2:
            return make_prism(dim(0.3, 0.45), dim(0.4, 0.8), albedos(5));
        case 3:
            return make_l_solid(dim(0.3, 0.45), dim(0.3, 0.45), dim(0.2, 0.35), dim(0.35, 0.55),
                                dim(0.35, 0.55), albedos(12));
        case 4:
            return make_ngon_prism(12, dim(0.25, 0.4), dim(0.4, 0.8), albedos(2));
        default:
            throw InvalidArgument("unknown shape class id");
    }
}

struct ViewImage {
    Tensor<float> pixels;  // [C,H,W] in [-1,1]
    int azimuth_index = 0;
};

// Deterministic render of one object at the given camera angles.
inline Tensor<float> render_object(const SceneObject& obj, double azimuth, double elevation,
                                   int resolution, int channels = 1) {
    Mesh mesh = build_object_mesh(obj);
    if (mesh.surface_area() < 1e-12)
        throw InvalidArgument("render_object: degenerate (zero-area) geometry");
    return rasterize(mesh, azimuth, elevation, resolution, channels);
}

struct DatasetConfig {
    std::uint64_t seed = 0;
    int train_objects = 600, val_objects = 100, test_objects = 200;
    int azimuths = 24;  // K views per object
    double elevation_deg = 20.0;
    int resolution = 16;
    int channels = 1;
    std::vector<std::string> classes;          // empty = all shape classes
    std::vector<std::string> holdout_classes;  // excluded from train only

    std::vector<std::string> class_pool() const {
        return classes.empty() ? shape_class_names() : classes;
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"train_objects", train_objects},
                {"val_objects", val_objects},
                {"test_objects", test_objects},
                {"azimuths", azimuths},
                {"elevation_deg", elevation_deg},
                {"resolution", resolution},
                {"channels", channels},
                {"holdout_classes", holdout_classes},
                {"classes", class_pool()}};
    }
};

namespace detail {

inline int class_name_id(const std::string& name) {
    const auto& names = shape_class_names();
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    throw InvalidArgument("unknown shape class '" + name + "'");
}

inline std::string object_dir_name(int object_id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "obj_%06d", object_id);
    return buf;
}

inline std::string view_file_name(int k) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "view_%02d.pgm", k);
    return buf;
}

}  // namespace detail

// Writes dataset_root/{train,val,test}/obj_xxxxxx/view_kk.pgm plus a meta
// file per object and a top-level manifest. Object ids are globally unique,
// so splits are disjoint by construction. Fully determined by (seed, config).
inline void generate_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    require(cfg.train_objects >= 1 && cfg.val_objects >= 1 && cfg.test_objects >= 1,
            "generate_dataset: need at least one object per split");
    require(cfg.azimuths >= 1, "generate_dataset: need K >= 1");
    std::vector<int> pool_classes;
    for (const auto& name : cfg.class_pool()) pool_classes.push_back(detail::class_name_id(name));
    require(!pool_classes.empty(), "generate_dataset: empty class pool");
    std::vector<int> train_classes;
    for (int c : pool_classes) {
        bool held = false;
        for (const auto& h : cfg.holdout_classes)
            if (detail::class_name_id(h) == c) held = true;
        if (!held) train_classes.push_back(c);
    }
    require(!train_classes.empty(), "generate_dataset: holdout must not cover every class");

    fs::create_directories(out_dir);
    const double elevation = cfg.elevation_deg * 3.14159265358979323846 / 180.0;
    const std::array<std::pair<const char*, int>, 3> splits = {
        std::pair<const char*, int>{"train", cfg.train_objects},
        std::pair<const char*, int>{"val", cfg.val_objects},
        std::pair<const char*, int>{"test", cfg.test_objects}};

    int next_id = 0;
    for (const auto& [split, count] : splits) {
        const fs::path split_dir = fs::path(out_dir) / split;
        fs::create_directories(split_dir);
        for (int i = 0; i < count; ++i) {
            const int object_id = next_id++;
            Rng obj_rng = Rng::substream(cfg.seed, "object" + std::to_string(object_id));
            SceneObject obj;
            obj.object_id = object_id;
            const bool is_train = std::string(split) == "train";
            const std::vector<int>& from = is_train ? train_classes : pool_classes;
            obj.class_id = from[static_cast<size_t>(obj_rng.uniform_below(from.size()))];
            obj.geom_seed = obj_rng.next_u64();

            const fs::path obj_dir = split_dir / detail::object_dir_name(object_id);
            fs::create_directories(obj_dir);
            Mesh mesh = build_object_mesh(obj);
            if (mesh.surface_area() < 1e-12)
                throw NumericError("generate_dataset: degenerate object geometry");
            for (int k = 0; k < cfg.azimuths; ++k) {
                const double az = 2.0 * 3.14159265358979323846 * k / cfg.azimuths;
                Tensor<float> img = rasterize(mesh, az, elevation, cfg.resolution, cfg.channels);
                write_pnm((obj_dir / detail::view_file_name(k)).string(), img);
            }
            nlohmann::json meta = {{"object_id", object_id},
                                   {"class", shape_class_names()[static_cast<size_t>(obj.class_id)]},
                                   {"geom_seed", obj.geom_seed},
                                   {"azimuths", cfg.azimuths},
                                   {"elevation_deg", cfg.elevation_deg},
                                   {"resolution", cfg.resolution},
                                   {"channels", cfg.channels}};
            std::ofstream mf(obj_dir / "meta.json", std::ios::trunc);
            if (!mf) throw IoError("cannot write object meta");
            mf << meta.dump(2) << "\n";
        }
    }

    nlohmann::json manifest = cfg.to_json();
    manifest["version"] = kVersion;
    std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::trunc);
    if (!mf) throw IoError("cannot write dataset manifest");
    mf << manifest.dump(2) << "\n";
}

// All K views of one object, loaded into memory.
struct ObjectViews {
    int object_id = 0;
    std::string class_name;
    int azimuths = 24;
    std::vector<Tensor<float>> views;  // index = azimuth index k
};

struct LoadedSplit {
    std::string split;
    nlohmann::json manifest;
    std::vector<ObjectViews> objects;
    int resolution = 0, channels = 0, azimuths = 0;
};

inline LoadedSplit load_split(const std::string& dataset_root, const std::string& split) {
    namespace fs = std::filesystem;
    LoadedSplit out;
    out.split = split;
    const fs::path root(dataset_root);
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw IoError("cannot open dataset manifest in " + dataset_root);
    mf >> out.manifest;
    out.resolution = out.manifest.at("resolution").get<int>();
    out.channels = out.manifest.at("channels").get<int>();
    out.azimuths = out.manifest.at("azimuths").get<int>();

    const fs::path split_dir = root / split;
    if (!fs::exists(split_dir)) throw IoError("no such split: " + split);
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(split_dir))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        std::ifstream om(d / "meta.json");
        if (!om) throw IoError("missing meta.json in " + d.string());
        nlohmann::json meta;
        om >> meta;
        ObjectViews ov;
        ov.object_id = meta.at("object_id").get<int>();
        ov.class_name = meta.at("class").get<std::string>();
        ov.azimuths = meta.at("azimuths").get<int>();
        for (int k = 0; k < ov.azimuths; ++k) {
            ov.views.push_back(read_pnm((d / detail::view_file_name(k)).string()));
        }
        out.objects.push_back(std::move(ov));
    }
    if (out.objects.empty()) throw IoError("split '" + split + "' is empty");
    return out;
}

// One training sample: pose-free conditioning views (azimuth indices are
// dropped), the target angle, and the ground-truth target image.
struct TrainingTuple {
    std::vector<Tensor<float>> views;
    double delta_psi = 0;
    Tensor<float> target;
};

// n ~ Uniform{1..v_max}; conditioning azimuths drawn without replacement;
// the target azimuth is drawn independently and may coincide with a
// conditioning view. In relative mode delta_psi is measured from the first
// sampled view (the reference), which is the one deliberate order-sensitive
// element of the tuple.
inline TrainingTuple sample_training_tuple(Rng& rng, const ObjectViews& obj, int v_max,
                                           PoseMode pose_mode) {
    const int k_total = obj.azimuths;
    require(v_max >= 1 && v_max <= k_total, "sample_training_tuple: need 1 <= V_max <= K");
    const int n = rng.uniform_int(1, v_max);
    std::vector<int> perm(static_cast<size_t>(k_total));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    perm.resize(static_cast<size_t>(n));
    const int target_k = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(k_total)));

    TrainingTuple t;
    for (int k : perm) t.views.push_back(obj.views[static_cast<size_t>(k)]);
    const double target_az = 2.0 * 3.14159265358979323846 * target_k / k_total;
    if (pose_mode == PoseMode::canonical) {
        t.delta_psi = wrap_angle(target_az);
    } else {
        const double first_az = 2.0 * 3.14159265358979323846 * perm[0] / k_total;
        t.delta_psi = wrap_angle(target_az - first_az);
    }
    t.target = obj.views[static_cast<size_t>(target_k)];
    return t;
}

}  // namespace mvdiff
