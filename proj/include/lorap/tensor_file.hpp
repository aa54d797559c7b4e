#pragma once

// Reader/writer for the flat tensor container: an 8-byte little-endian header
// length, a JSON header mapping name -> {dtype, shape, data_offsets}, then the
// raw payload. Offsets are relative to the start of the payload.

#include <lorap/error.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lorap {

static_assert(std::endian::native == std::endian::little, "tensor container I/O assumes a little-endian host");

enum class DType { F32, F16, I32 };

inline std::size_t dtype_size(DType t) {
    switch (t) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::I32: return 4;
    }
    return 0;
}

inline const char* dtype_name(DType t) {
    switch (t) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::I32: return "I32";
    }
    return "?";
}

inline DType parse_dtype(const std::string& s, const std::string& tensor) {
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "I32") return DType::I32;
    throw FormatError("tensor '" + tensor + "': unsupported dtype '" + s + "'");
}

// IEEE binary16 <-> binary32, round-to-nearest-even on the narrowing side.
inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits = 0;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

inline std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7FFFFFFFu;
    if (abs >= 0x7F800000u) {
        return static_cast<std::uint16_t>(sign | 0x7C00u | (abs > 0x7F800000u ? 0x200u : 0u));
    }
    if (abs >= 0x477FF000u) return static_cast<std::uint16_t>(sign | 0x7C00u); // overflow to inf
    if (abs < 0x38800000u) {                                                    // subnormal half
        if (abs < 0x33000000u) return sign;
        const std::uint32_t exp = abs >> 23;
        const std::uint32_t mant = (abs & 0x7FFFFFu) | 0x800000u;
        const std::uint32_t shift = 126 - exp; // 14..24
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t h = ((abs >> 13) - ((127u - 15u) << 10));
    const std::uint32_t rem = abs & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
}

struct TensorEntry {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::size_t> shape;
    std::size_t begin = 0;
    std::size_t end = 0;

    [[nodiscard]] std::size_t element_count() const {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

class TensorContainer {
public:
    TensorContainer() = default;

    static TensorContainer parse(std::span<const std::byte> bytes) {
        if (bytes.size() < 8) throw FormatError("tensor file too short to hold a header length");
        std::uint64_t header_len = 0;
        std::memcpy(&header_len, bytes.data(), 8);
        if (header_len > bytes.size() - 8) throw FormatError("tensor file header length exceeds file size");
        const std::string header_text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(header_text);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("tensor file header is not valid JSON: ") + e.what());
        }
        if (!header.is_object()) throw FormatError("tensor file header is not a JSON object");

        TensorContainer c;
        const std::size_t payload_size = bytes.size() - 8 - header_len;
        for (const auto& [name, spec] : header.items()) {
            if (name == "__metadata__") {
                c.metadata_ = spec;
                continue;
            }
            TensorEntry e;
            e.name = name;
            try {
                e.dtype = parse_dtype(spec.at("dtype").get<std::string>(), name);
                e.shape = spec.at("shape").get<std::vector<std::size_t>>();
                const auto offs = spec.at("data_offsets").get<std::vector<std::size_t>>();
                if (offs.size() != 2) throw FormatError("tensor '" + name + "': data_offsets must have two entries");
                e.begin = offs[0];
                e.end = offs[1];
            } catch (const nlohmann::json::exception& ex) {
                throw FormatError("tensor '" + name + "': malformed header entry (" + ex.what() + ")");
            }
            if (e.end < e.begin) throw FormatError("tensor '" + name + "': data_offsets are reversed");
            if (e.end > payload_size) throw FormatError("tensor '" + name + "': truncated payload");
            if (e.element_count() * dtype_size(e.dtype) != e.end - e.begin) {
                throw FormatError("tensor '" + name + "': shape does not match byte range length");
            }
            c.entries_.push_back(std::move(e));
        }
        std::ranges::sort(c.entries_, [](const TensorEntry& a, const TensorEntry& b) {
            return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
        });
        std::size_t cursor = 0;
        for (const auto& e : c.entries_) {
            if (e.begin < cursor) throw FormatError("tensor '" + e.name + "': overlapping byte ranges");
            if (e.begin > cursor) throw FormatError("tensor '" + e.name + "': gap before byte range");
            cursor = e.end;
        }
        if (cursor != payload_size) throw FormatError("tensor payload has trailing bytes not covered by any tensor");
        c.payload_.assign(bytes.begin() + static_cast<std::ptrdiff_t>(8 + header_len), bytes.end());
        return c;
    }

    static TensorContainer from_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open tensor file '" + path.string() + "'");
        std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (raw.empty()) throw FormatError("tensor file '" + path.string() + "' is empty");
        return parse(std::as_bytes(std::span(raw)));
    }

    [[nodiscard]] const std::vector<TensorEntry>& entries() const noexcept { return entries_; }
    [[nodiscard]] const nlohmann::json& metadata() const noexcept { return metadata_; }

    [[nodiscard]] const TensorEntry* find(const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }

    [[nodiscard]] const TensorEntry& at(const std::string& name) const {
        const TensorEntry* e = find(name);
        if (e == nullptr) throw FormatError("missing tensor '" + name + "'");
        return *e;
    }

    [[nodiscard]] std::span<const std::byte> raw(const TensorEntry& e) const {
        return std::span(payload_).subspan(e.begin, e.end - e.begin);
    }

    [[nodiscard]] std::vector<double> read_real(const TensorEntry& e) const {
        const auto bytes = raw(e);
        std::vector<double> out(e.element_count());
        if (e.dtype == DType::F32) {
            for (std::size_t i = 0; i < out.size(); ++i) {
                float f;
                std::memcpy(&f, bytes.data() + 4 * i, 4);
                out[i] = f;
            }
        } else if (e.dtype == DType::F16) {
            for (std::size_t i = 0; i < out.size(); ++i) {
                std::uint16_t h;
                std::memcpy(&h, bytes.data() + 2 * i, 2);
                out[i] = half_to_float(h);
            }
        } else {
            throw FormatError("tensor '" + e.name + "': expected a floating-point dtype");
        }
        return out;
    }

    [[nodiscard]] std::vector<std::int32_t> read_i32(const TensorEntry& e) const {
        if (e.dtype != DType::I32) throw FormatError("tensor '" + e.name + "': expected dtype I32");
        std::vector<std::int32_t> out(e.element_count());
        std::memcpy(out.data(), raw(e).data(), out.size() * 4);
        return out;
    }

private:
    std::vector<TensorEntry> entries_;
    std::vector<std::byte> payload_;
    nlohmann::json metadata_;
};

/// Collects tensors and serializes them in name order with a space-padded
/// header, so identical content always yields identical bytes.
class TensorWriter {
public:
    void add_f32(const std::string& name, std::vector<std::size_t> shape, std::span<const double> values) {
        std::vector<std::byte> bytes(values.size() * 4);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const float f = static_cast<float>(values[i]);
            std::memcpy(bytes.data() + 4 * i, &f, 4);
        }
        add(name, DType::F32, std::move(shape), std::move(bytes));
    }

    void add_f16(const std::string& name, std::vector<std::size_t> shape, std::span<const double> values) {
        std::vector<std::byte> bytes(values.size() * 2);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::uint16_t h = float_to_half(static_cast<float>(values[i]));
            std::memcpy(bytes.data() + 2 * i, &h, 2);
        }
        add(name, DType::F16, std::move(shape), std::move(bytes));
    }

    void add_i32(const std::string& name, std::span<const std::int32_t> values) {
        std::vector<std::byte> bytes(values.size() * 4);
        std::memcpy(bytes.data(), values.data(), bytes.size());
        add(name, DType::I32, {values.size()}, std::move(bytes));
    }

    void add(const std::string& name, DType dtype, std::vector<std::size_t> shape, std::vector<std::byte> bytes) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        if (n * dtype_size(dtype) != bytes.size()) {
            throw ArgumentError("tensor '" + name + "': byte length does not match shape");
        }
        if (tensors_.contains(name)) throw ArgumentError("duplicate tensor name '" + name + "'");
        tensors_.emplace(name, Pending{dtype, std::move(shape), std::move(bytes)});
    }

    void set_metadata(nlohmann::json meta) { metadata_ = std::move(meta); }

    [[nodiscard]] std::vector<std::byte> serialize() const {
        nlohmann::json header = nlohmann::json::object();
        std::size_t offset = 0;
        for (const auto& [name, t] : tensors_) {
            header[name] = {{"dtype", dtype_name(t.dtype)},
                            {"shape", t.shape},
                            {"data_offsets", {offset, offset + t.bytes.size()}}};
            offset += t.bytes.size();
        }
        if (!metadata_.is_null()) header["__metadata__"] = metadata_;
        std::string text = header.dump();
        while ((8 + text.size()) % 8 != 0) text.push_back(' ');

        std::vector<std::byte> out(8 + text.size());
        const std::uint64_t len = text.size();
        std::memcpy(out.data(), &len, 8);
        std::memcpy(out.data() + 8, text.data(), text.size());
        out.reserve(out.size() + offset);
        for (const auto& [name, t] : tensors_) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
        return out;
    }

    void write(const std::filesystem::path& path) const {
        const auto bytes = serialize();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for '" + path.string() + "'");
    }

private:
    struct Pending {
        DType dtype;
        std::vector<std::size_t> shape;
        std::vector<std::byte> bytes;
    };
    std::map<std::string, Pending> tensors_;
    nlohmann::json metadata_;
};

} // namespace lorap
