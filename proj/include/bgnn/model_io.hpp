#pragma once

// ModelFile layout, all integers little-endian:
//
//   "BGNN"  u32 version  u8 record kind (0 deploy, 1 checkpoint)
//   u32 n + n bytes      model spec text
//   u32 count            parameter records:
//       u16 n + name, u8 encoding (0 f32, 1 packed sign bits), u8 ndim, u32 dims[ndim],
//       f32 payload, or rows * ceil(cols / 64) u64 words in bitcore layout
//   u32 count            buffer records (batch-norm running statistics), f32 only
//   checkpoint only:     u64 step, u64 epoch, u32 n + RNG state text,
//                        u32 count + (u16 n + name, f32 m[size], f32 v[size])
//   u32 CRC32 of every preceding byte
//
// Deploy records keep only the signs of binarized weights; checkpoints keep
// latent weights and optimizer state.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bgnn/model.hpp"
#include "bgnn/training.hpp"

namespace bgnn {

inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class RecordKind : std::uint8_t { deploy = 0, checkpoint = 1 };
enum class Encoding : std::uint8_t { f32 = 0, packed_bits = 1 };

struct SaveOptions {
    RecordKind kind = RecordKind::deploy;
    /// Store every tensor as f32 even where the spec binarizes it.
    bool force_float = false;
    /// Optimizer state for checkpoints (optional).
    const TrainState* state = nullptr;
};

std::vector<std::uint8_t> save_model(Model<float>& model, const SaveOptions& opt = {});

struct LoadedModel {
    Model<float> model;
    RecordKind kind = RecordKind::deploy;
    std::optional<TrainState> state;
};

/// Throws BadMagicError, VersionError, ChecksumError or FormatError.
LoadedModel load_model(std::span<const std::uint8_t> bytes);

/// Deployment form of a model: what save + load of a deploy record yields.
Model<float> deployed(Model<float>& model);

struct RecordInfo {
    std::string name;
    Encoding encoding;
    std::vector<std::size_t> shape;
    std::size_t payload_bytes;
    /// Packed records: logical bits (rows * cols) and whether padding is zero.
    std::size_t logical_bits = 0;
    bool padding_zero = true;
};

/// Parameter records of a verified file.
std::vector<RecordInfo> inspect_model(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace bgnn
