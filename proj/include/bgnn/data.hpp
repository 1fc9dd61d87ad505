#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bgnn/config.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn {

struct PointCloudDataset {
    /// One n x 3 tensor per cloud.
    std::vector<Tensor<float>> clouds;
    std::vector<int> labels;
    std::vector<std::string> splits;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return clouds.size(); }
    PointCloudDataset subset(const std::string& split) const;
    /// Throws ValueError when a cloud is empty or a label is out of range.
    void validate() const;
};

/// Centres a cloud on its centroid and scales it into the unit sphere.
void normalize_unit_sphere(Tensor<float>& cloud);

/// Reads `<dir>/manifest.tsv` (or the manifest file itself when `path` is a
/// file) with lines "filename<TAB>label<TAB>split". Each data file holds one
/// "x y z" point per line; blank lines and '#' comments are skipped.
PointCloudDataset load_xyz_dataset(const std::string& path, bool normalize = true);

/// Writes a dataset in the load_xyz_dataset layout.
void save_xyz_dataset(const PointCloudDataset& ds, const std::string& dir);

/// Brings every cloud to exactly `points` points: a seeded subset without
/// replacement when larger, sampling with replacement when smaller.
void resample_points(PointCloudDataset& ds, std::size_t points, std::uint64_t seed);

enum class ShapeKind { sphere, cube, two_planes };

/// Surface samples of simple shapes with a random anisotropic stretch in
/// [0.8, 1.25] per axis and N(0, 0.01) noise, normalized into the unit sphere.
/// Class c is kinds[c]. Produces `train_per_class` clouds tagged "train" and
/// `test_per_class` tagged "test" for every class.
PointCloudDataset synth_dataset(const std::vector<ShapeKind>& kinds, std::size_t points,
                                std::size_t train_per_class, std::size_t test_per_class,
                                std::uint64_t seed);

ShapeKind parse_shape_kind(const std::string& s);

/// Dataset described by a [data] section:
///   source = synth | xyz
///   path = <dir or manifest>                       (xyz)
///   shapes = sphere,cube,two_planes                (synth)
///   points, train_per_class, test_per_class, seed  (synth; points also
///   resamples xyz clouds when given)
///   normalize = true                               (xyz)
/// `seed` falls back to `default_seed`.
PointCloudDataset dataset_from_section(const ConfigSection& s, std::uint64_t default_seed);

}  // namespace bgnn
