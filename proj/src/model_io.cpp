#include "bgnn/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace bgnn {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename U>
    void le(U v) {
        using Raw = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                    std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
        Raw r = std::bit_cast<Raw>(v);
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(r >> (8 * i)));
    }
    void str32(const std::string& s) {
        le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void str16(const std::string& s) {
        if (s.size() > 0xFFFF) throw FormatError("record name too long");
        le<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void floats(const Tensor<float>& t) {
        for (float v : t.storage()) le<float>(v);
    }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw FormatError("model file truncated");
    }
    template <typename U>
    U le() {
        using Raw = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                    std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
        need(sizeof(U));
        Raw r = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) r |= static_cast<Raw>(Raw(b_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return std::bit_cast<U>(r);
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string str32() { return str(le<std::uint32_t>()); }
    std::string str16() { return str(le<std::uint16_t>()); }
    Tensor<float> floats(std::vector<std::size_t> shape) {
        const std::size_t n = Tensor<float>::count(shape);
        need(n * 4);
        Tensor<float> t(std::move(shape));
        for (auto& v : t.storage()) v = le<float>();
        return t;
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return b_.size(); }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

void write_shape(Writer& w, const std::vector<std::size_t>& shape) {
    if (shape.size() > 255) throw FormatError("tensor rank too large");
    w.le<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
}

std::vector<std::size_t> read_shape(Reader& r) {
    const auto nd = r.le<std::uint8_t>();
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) d = r.le<std::uint32_t>();
    return shape;
}

/// Rows and columns of a tensor viewed as a matrix (vectors are one row).
std::pair<std::size_t, std::size_t> matrix_view(const std::vector<std::size_t>& shape) {
    if (shape.size() <= 1) return {1, shape.empty() ? 0 : shape[0]};
    std::size_t cols = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
    return {shape[0], cols};
}

/// Checks magic, version and checksum; returns a reader positioned after the
/// version field and the payload end.
std::pair<Reader, std::size_t> open(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "BGNN", 4) != 0)
        throw BadMagicError("not a model file (bad magic)");
    if (bytes.size() < 12) throw FormatError("model file truncated");
    Reader r(bytes);
    r.str(4);
    const auto version = r.le<std::uint32_t>();
    if (version != kModelFormatVersion)
        throw VersionError("unsupported model format version " + std::to_string(version) +
                           " (expected " + std::to_string(kModelFormatVersion) + ")");
    const std::size_t end = bytes.size() - 4;
    Reader tail(bytes.subspan(end));
    const auto stored = tail.le<std::uint32_t>();
    if (crc32_of(bytes.first(end)) != stored) throw ChecksumError("model file checksum mismatch");
    return {r, end};
}

struct ParamRecord {
    std::string name;
    Encoding enc;
    std::vector<std::size_t> shape;
    Tensor<float> value;
    std::size_t payload_bytes;
    std::size_t logical_bits;
    bool padding_zero;
};

ParamRecord read_param(Reader& r) {
    ParamRecord p;
    p.name = r.str16();
    const auto enc = r.le<std::uint8_t>();
    if (enc > 1) throw FormatError("record " + p.name + ": unknown encoding");
    p.enc = static_cast<Encoding>(enc);
    p.shape = read_shape(r);
    p.logical_bits = 0;
    p.padding_zero = true;
    if (p.enc == Encoding::f32) {
        const auto start = r.pos();
        p.value = r.floats(p.shape);
        p.payload_bytes = r.pos() - start;
        return p;
    }
    const auto [rows, cols] = matrix_view(p.shape);
    const std::size_t wpr = BitMatrix::words_for(cols);
    std::vector<std::uint64_t> words(rows * wpr);
    for (auto& w : words) w = r.le<std::uint64_t>();
    p.payload_bytes = words.size() * 8;
    p.logical_bits = rows * cols;
    BitMatrix bits;
    try {
        bits = BitMatrix::from_words(rows, cols, std::move(words));
    } catch (const Error&) {
        throw FormatError("record " + p.name + ": non-zero padding bits");
    }
    p.value = unpack<float>(bits).reshaped(p.shape);
    return p;
}

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        c = crc32(c, bytes.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(c);
}

std::vector<std::uint8_t> save_model(Model<float>& model, const SaveOptions& opt) {
    Writer w;
    w.bytes("BGNN", 4);
    w.le<std::uint32_t>(kModelFormatVersion);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(opt.kind));
    w.str32(model.spec.to_text());

    std::uint32_t count = 0;
    model.for_each_parameter([&](const std::string&, Parameter<float>&, ParamRole) { ++count; });
    w.le<std::uint32_t>(count);
    const bool packed_ok = opt.kind == RecordKind::deploy && !opt.force_float;
    model.for_each_parameter([&](const std::string& name, Parameter<float>& p, ParamRole role) {
        w.str16(name);
        const bool packed = packed_ok && model.stores_binary(role);
        w.le<std::uint8_t>(static_cast<std::uint8_t>(packed ? Encoding::packed_bits : Encoding::f32));
        write_shape(w, p.value.shape());
        if (!packed) {
            w.floats(p.value);
            return;
        }
        const auto [rows, cols] = matrix_view(p.value.shape());
        const BitMatrix bits = pack_signs(p.value.data(), rows, cols);
        for (auto word : bits.words()) w.le<std::uint64_t>(word);
    });

    std::uint32_t nbuf = 0;
    model.for_each_buffer([&](const std::string&, Tensor<float>&) { ++nbuf; });
    w.le<std::uint32_t>(nbuf);
    model.for_each_buffer([&](const std::string& name, Tensor<float>& t) {
        w.str16(name);
        write_shape(w, t.shape());
        w.floats(t);
    });

    if (opt.kind == RecordKind::checkpoint) {
        TrainState empty;
        const TrainState& st = opt.state ? *opt.state : empty;
        w.le<std::uint64_t>(st.step);
        w.le<std::uint64_t>(st.epoch);
        w.str32(st.rng_state());
        w.le<std::uint32_t>(static_cast<std::uint32_t>(st.adam.size()));
        for (const auto& [name, slot] : st.adam) {
            w.str16(name);
            write_shape(w, slot.m.shape());
            w.floats(slot.m);
            w.floats(slot.v);
        }
    }
    w.le<std::uint32_t>(crc32_of(w.data()));
    return std::move(w.data());
}

LoadedModel load_model(std::span<const std::uint8_t> bytes) {
    auto [r, end] = open(bytes);
    LoadedModel out;
    const auto kind = r.le<std::uint8_t>();
    if (kind > 1) throw FormatError("unknown record kind " + std::to_string(kind));
    out.kind = static_cast<RecordKind>(kind);
    ModelSpec spec;
    try {
        spec = ModelSpec::from_text(r.str32());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("embedded model spec: ") + e.what());
    }
    out.model = Model<float>::init(spec, 0);

    std::map<std::string, ParamRecord> params;
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        ParamRecord p = read_param(r);
        params.emplace(p.name, std::move(p));
    }
    std::size_t matched = 0;
    out.model.for_each_parameter([&](const std::string& name, Parameter<float>& p, ParamRole) {
        auto it = params.find(name);
        if (it == params.end()) throw FormatError("missing parameter record " + name);
        if (it->second.shape != p.value.shape())
            throw FormatError("parameter " + name + " has shape " + shape_string(it->second.shape) +
                              ", spec expects " + shape_string(p.value.shape()));
        p.value = std::move(it->second.value);
        p.zero_grad();
        ++matched;
    });
    if (matched != params.size()) throw FormatError("file holds parameters the spec does not define");

    std::map<std::string, Tensor<float>> buffers;
    const auto nbuf = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < nbuf; ++i) {
        std::string name = r.str16();
        auto shape = read_shape(r);
        buffers.emplace(std::move(name), r.floats(std::move(shape)));
    }
    out.model.for_each_buffer([&](const std::string& name, Tensor<float>& t) {
        auto it = buffers.find(name);
        if (it == buffers.end()) throw FormatError("missing buffer record " + name);
        if (!it->second.same_shape(t)) throw FormatError("buffer " + name + " has the wrong shape");
        t = std::move(it->second);
    });

    if (out.kind == RecordKind::checkpoint) {
        TrainState st;
        st.step = r.le<std::uint64_t>();
        st.epoch = static_cast<std::size_t>(r.le<std::uint64_t>());
        st.set_rng_state(r.str32());
        const auto n = r.le<std::uint32_t>();
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = r.str16();
            auto shape = read_shape(r);
            AdamSlot slot;
            slot.m = r.floats(shape);
            slot.v = r.floats(shape);
            st.adam.emplace(std::move(name), std::move(slot));
        }
        out.state = std::move(st);
    }
    if (r.pos() != end) throw FormatError("trailing bytes before checksum");
    return out;
}

Model<float> deployed(Model<float>& model) {
    const auto bytes = save_model(model);
    return load_model(bytes).model;
}

std::vector<RecordInfo> inspect_model(std::span<const std::uint8_t> bytes) {
    auto [r, end] = open(bytes);
    r.le<std::uint8_t>();
    r.str32();
    std::vector<RecordInfo> out;
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        ParamRecord p = read_param(r);
        out.push_back({p.name, p.enc, p.shape, p.payload_bytes, p.logical_bits, p.padding_zero});
    }
    return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for " + path);
}

}  // namespace bgnn
