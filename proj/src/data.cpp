#include "bgnn/data.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "bgnn/config.hpp"

namespace bgnn {

namespace fs = std::filesystem;

PointCloudDataset PointCloudDataset::subset(const std::string& split) const {
    PointCloudDataset out;
    out.classes = classes;
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        if (splits[i] != split) continue;
        out.clouds.push_back(clouds[i]);
        out.labels.push_back(labels[i]);
        out.splits.push_back(splits[i]);
    }
    return out;
}

void PointCloudDataset::validate() const {
    if (labels.size() != clouds.size() || splits.size() != clouds.size())
        throw ValueError("dataset: clouds, labels and splits differ in length");
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        if (clouds[i].rows() == 0) throw ValueError("dataset: cloud " + std::to_string(i) + " is empty");
        if (clouds[i].cols() != 3)
            throw ValueError("dataset: cloud " + std::to_string(i) + " is not n x 3");
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
            throw ValueError("dataset: label " + std::to_string(labels[i]) + " of cloud " +
                             std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
}

void normalize_unit_sphere(Tensor<float>& cloud) {
    const std::size_t n = cloud.rows();
    if (n == 0) return;
    double c[3] = {0, 0, 0};
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) c[a] += cloud.at(i, a);
    for (auto& v : c) v /= static_cast<double>(n);
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double d = cloud.at(i, a) - c[a];
            s += d * d;
        }
        r = std::max(r, s);
    }
    r = std::sqrt(r);
    const double inv = r > 0.0 ? 1.0 / r : 1.0;
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a)
            cloud.at(i, a) = static_cast<float>((cloud.at(i, a) - c[a]) * inv);
}

namespace {

float parse_float(const std::string& tok, const std::string& file, std::size_t line) {
    float v = 0.0f;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size() || !std::isfinite(v))
        throw ParseError(file + ":" + std::to_string(line) + ": bad coordinate '" + tok + "'");
    return v;
}

Tensor<float> read_cloud(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ParseError(file.string() + ": cannot open point file");
    std::vector<float> data;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        std::vector<std::string> toks;
        std::string tok;
        while (ss >> tok) toks.push_back(tok);
        if (toks.empty()) continue;
        if (toks.size() != 3)
            throw ParseError(file.string() + ":" + std::to_string(lineno) +
                             ": expected 3 coordinates, found " + std::to_string(toks.size()));
        for (const auto& t : toks) data.push_back(parse_float(t, file.string(), lineno));
    }
    if (data.empty()) throw ParseError(file.string() + ": no points");
    const std::size_t n = data.size() / 3;
    return Tensor<float>({n, 3}, std::move(data));
}

}  // namespace

PointCloudDataset load_xyz_dataset(const std::string& path, bool normalize) {
    fs::path manifest = path;
    if (fs::is_directory(manifest)) manifest /= "manifest.tsv";
    std::ifstream in(manifest);
    if (!in) throw ParseError(manifest.string() + ": manifest not found");
    const fs::path base = manifest.parent_path();
    PointCloudDataset ds;
    std::string line;
    std::size_t lineno = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty() || trim(line).front() == '#') continue;
        const auto fields = split(line, '\t');
        const std::string where = manifest.string() + ":" + std::to_string(lineno);
        if (fields.size() != 3 || fields[0].empty())
            throw ParseError(where + ": expected filename<TAB>label<TAB>split");
        int label = 0;
        auto [p, ec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), label);
        if (ec != std::errc() || p != fields[1].data() + fields[1].size() || label < 0)
            throw ParseError(where + ": bad label '" + fields[1] + "'");
        if (fields[2].empty()) throw ParseError(where + ": empty split tag");
        Tensor<float> cloud = read_cloud(base / fields[0]);
        if (normalize) normalize_unit_sphere(cloud);
        ds.clouds.push_back(std::move(cloud));
        ds.labels.push_back(label);
        ds.splits.push_back(fields[2]);
        max_label = std::max(max_label, label);
    }
    if (ds.clouds.empty()) throw ParseError(manifest.string() + ": manifest lists no clouds");
    ds.classes = static_cast<std::size_t>(max_label + 1);
    return ds;
}

void save_xyz_dataset(const PointCloudDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream man(fs::path(dir) / "manifest.tsv");
    if (!man) throw Error("cannot write manifest in " + dir);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string name = "cloud_" + std::to_string(i) + ".xyz";
        std::ofstream f(fs::path(dir) / name);
        f.precision(9);
        const auto& c = ds.clouds[i];
        for (std::size_t r = 0; r < c.rows(); ++r)
            f << c.at(r, 0) << ' ' << c.at(r, 1) << ' ' << c.at(r, 2) << '\n';
        man << name << '\t' << ds.labels[i] << '\t' << ds.splits[i] << '\n';
    }
}

void resample_points(PointCloudDataset& ds, std::size_t points, std::uint64_t seed) {
    if (points == 0) throw ValueError("resample_points: zero points requested");
    std::mt19937_64 rng(seed);
    for (auto& c : ds.clouds) {
        const std::size_t n = c.rows();
        if (n == points) continue;
        std::vector<std::size_t> pick(points);
        if (n > points) {
            std::vector<std::size_t> idx(n);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::shuffle(idx.begin(), idx.end(), rng);
            std::copy_n(idx.begin(), points, pick.begin());
        } else {
            std::uniform_int_distribution<std::size_t> u(0, n - 1);
            for (auto& p : pick) p = u(rng);
        }
        Tensor<float> out = Tensor<float>::matrix(points, 3);
        for (std::size_t i = 0; i < points; ++i)
            for (int a = 0; a < 3; ++a) out.at(i, a) = c.at(pick[i], a);
        c = std::move(out);
    }
}

ShapeKind parse_shape_kind(const std::string& s) {
    if (s == "sphere") return ShapeKind::sphere;
    if (s == "cube") return ShapeKind::cube;
    if (s == "two_planes") return ShapeKind::two_planes;
    throw ConfigError("unknown shape kind '" + s + "' (sphere|cube|two_planes)");
}

namespace {

void sample_surface(ShapeKind kind, std::mt19937_64& rng, double xyz[3]) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    switch (kind) {
        case ShapeKind::sphere: {
            std::normal_distribution<double> g(0.0, 1.0);
            double r = 0.0;
            do {
                for (int a = 0; a < 3; ++a) xyz[a] = g(rng);
                r = std::sqrt(xyz[0] * xyz[0] + xyz[1] * xyz[1] + xyz[2] * xyz[2]);
            } while (r < 1e-9);
            for (int a = 0; a < 3; ++a) xyz[a] /= r;
            return;
        }
        case ShapeKind::cube: {
            std::uniform_int_distribution<int> face(0, 5);
            const int f = face(rng);
            for (int a = 0; a < 3; ++a) xyz[a] = u(rng);
            xyz[f / 2] = f % 2 ? 1.0 : -1.0;
            return;
        }
        case ShapeKind::two_planes: {
            std::bernoulli_distribution side(0.5);
            xyz[0] = u(rng);
            xyz[1] = u(rng);
            xyz[2] = side(rng) ? 0.5 : -0.5;
            return;
        }
    }
}

}  // namespace

PointCloudDataset synth_dataset(const std::vector<ShapeKind>& kinds, std::size_t points,
                                std::size_t train_per_class, std::size_t test_per_class,
                                std::uint64_t seed) {
    if (kinds.empty()) throw ValueError("synth_dataset: no shape kinds");
    if (points == 0) throw ValueError("synth_dataset: zero points per cloud");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> stretch(std::log(0.8), std::log(1.25));
    std::normal_distribution<double> noise(0.0, 0.01);
    PointCloudDataset ds;
    ds.classes = kinds.size();
    for (const char* split : {"train", "test"}) {
        const std::size_t per = std::string(split) == "train" ? train_per_class : test_per_class;
        for (std::size_t i = 0; i < per; ++i) {
            for (std::size_t c = 0; c < kinds.size(); ++c) {
                double s[3];
                for (auto& v : s) v = std::exp(stretch(rng));
                Tensor<float> cloud = Tensor<float>::matrix(points, 3);
                for (std::size_t p = 0; p < points; ++p) {
                    double xyz[3];
                    sample_surface(kinds[c], rng, xyz);
                    for (int a = 0; a < 3; ++a)
                        cloud.at(p, a) = static_cast<float>(xyz[a] * s[a] + noise(rng));
                }
                normalize_unit_sphere(cloud);
                ds.clouds.push_back(std::move(cloud));
                ds.labels.push_back(static_cast<int>(c));
                ds.splits.emplace_back(split);
            }
        }
    }
    return ds;
}

PointCloudDataset dataset_from_section(const ConfigSection& s, std::uint64_t default_seed) {
    s.reject_unknown({"source", "path", "shapes", "points", "train_per_class", "test_per_class",
                      "seed", "normalize"});
    const std::string source = s.get("source", "synth");
    const auto seed = static_cast<std::uint64_t>(
        s.get_int("seed", static_cast<std::int64_t>(default_seed)));
    auto count = [&](const char* key, std::int64_t fallback) {
        const auto v = s.get_int(key, fallback);
        if (v < 0) throw ConfigError(std::string("[data] ") + key + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    if (source == "synth") {
        std::vector<ShapeKind> kinds;
        for (const auto& k : split(s.get("shapes", "sphere,cube,two_planes"), ','))
            if (!trim(k).empty()) kinds.push_back(parse_shape_kind(trim(k)));
        const std::size_t points = count("points", 128);
        if (points == 0) throw ConfigError("[data] points must be positive");
        return synth_dataset(kinds, points, count("train_per_class", 300),
                             count("test_per_class", 60), seed);
    }
    if (source == "xyz") {
        if (!s.has("path")) throw ConfigError("[data] source = xyz needs a path");
        PointCloudDataset ds = load_xyz_dataset(s.get("path", ""), s.get_bool("normalize", true));
        if (s.has("points")) {
            const std::size_t points = count("points", 0);
            if (points == 0) throw ConfigError("[data] points must be positive");
            resample_points(ds, points, seed);
        }
        return ds;
    }
    throw ConfigError("[data] unknown source '" + source + "' (synth|xyz)");
}

}  // namespace bgnn
