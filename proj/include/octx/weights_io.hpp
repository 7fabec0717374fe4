#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "octx/octnet.hpp"

// Weight file layout (all integers little-endian):
//   "OCTX" | u16 version | u16 descriptor count
//   per descriptor: u8 kind | u8 dim count | u32 dims...
//   float32 parameters in layer order (weights then bias)
//   u32 CRC32 of the parameter bytes
// Descriptor dims: conv = kh kw cin cout stride pad, maxpool = window stride,
// dropout = IEEE bits of the rate, flatten = length, dense = in out,
// head (kind 6) = 0 sigmoid / 1 softmax.

namespace octx {

inline constexpr char kWeightMagic[4] = {'O', 'C', 'T', 'X'};
inline constexpr std::uint16_t kWeightVersion = 1;
inline constexpr std::uint8_t kHeadDescriptorKind = 6;

enum class WeightErrorKind { io, magic, version, truncated, checksum, architecture };

class WeightFileError : public std::runtime_error {
public:
    WeightFileError(WeightErrorKind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
    WeightErrorKind kind() const { return kind_; }

private:
    WeightErrorKind kind_;
};

inline std::uint32_t crc32_of(const void* data, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v));
        u8(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int s = 0; s < 32; s += 8) u8(static_cast<std::uint8_t>(v >> s));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
    void need(std::size_t n) const {
        if (pos_ + n > b_.size())
            throw WeightFileError(WeightErrorKind::truncated,
                                  "weight file truncated at byte " + std::to_string(pos_) + " (needed " +
                                      std::to_string(n) + " more)");
    }
    std::uint8_t u8() {
        need(1);
        return b_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const auto* p = b_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint32_t> descriptor_dims(const OctNet& net, std::size_t i) {
    const auto& l = net.layers()[i];
    switch (l.kind) {
        case LayerKind::conv:
            return {static_cast<std::uint32_t>(l.conv.kernel_h), static_cast<std::uint32_t>(l.conv.kernel_w),
                    static_cast<std::uint32_t>(l.conv.in_channels), static_cast<std::uint32_t>(l.conv.out_channels),
                    static_cast<std::uint32_t>(l.conv.stride), static_cast<std::uint32_t>(l.conv.padding)};
        case LayerKind::maxpool:
            return {3, 2};
        case LayerKind::dropout:
            return {std::bit_cast<std::uint32_t>(static_cast<float>(net.dropout_rate(i)))};
        case LayerKind::flatten:
            return {static_cast<std::uint32_t>(l.out_shape[0])};
        case LayerKind::dense:
            return {static_cast<std::uint32_t>(l.dense_in), static_cast<std::uint32_t>(l.dense_out)};
    }
    return {};
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_weights(const OctNet& net) {
    detail::ByteWriter w;
    w.bytes(kWeightMagic, 4);
    w.u16(kWeightVersion);
    w.u16(static_cast<std::uint16_t>(net.layers().size() + 1));
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const auto dims = detail::descriptor_dims(net, i);
        w.u8(static_cast<std::uint8_t>(net.layers()[i].kind));
        w.u8(static_cast<std::uint8_t>(dims.size()));
        for (auto d : dims) w.u32(d);
    }
    w.u8(kHeadDescriptorKind);
    w.u8(1);
    w.u32(static_cast<std::uint32_t>(net.config().head));
    const std::size_t payload_start = w.buffer().size();
    for (const auto& p : net.params())
        for (float v : p.data()) w.f32(v);
    auto& buf = w.buffer();
    w.u32(crc32_of(buf.data() + payload_start, buf.size() - payload_start));
    return std::move(buf);
}

inline OctNet deserialize_weights(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kWeightMagic, 4) != 0)
        throw WeightFileError(WeightErrorKind::magic, "not an OCTX weight file (bad magic)");
    r.take(4);
    const auto version = r.u16();
    if (version != kWeightVersion)
        throw WeightFileError(WeightErrorKind::version, "unsupported weight file version " + std::to_string(version));
    const auto count = r.u16();

    OctNet reference;
    NetConfig cfg;
    if (count != reference.layers().size() + 1)
        throw WeightFileError(WeightErrorKind::architecture,
                              "weight file describes " + std::to_string(count) + " layers, expected " +
                                  std::to_string(reference.layers().size() + 1));
    for (std::size_t i = 0; i < count; ++i) {
        const auto kind = r.u8();
        const auto ndims = r.u8();
        std::vector<std::uint32_t> dims(ndims);
        for (auto& d : dims) d = r.u32();
        if (i == reference.layers().size()) {
            if (kind != kHeadDescriptorKind || ndims != 1 || dims[0] > 1)
                throw WeightFileError(WeightErrorKind::architecture, "bad output head descriptor");
            cfg.head = static_cast<OutputHead>(dims[0]);
            continue;
        }
        const auto& l = reference.layers()[i];
        if (kind != static_cast<std::uint8_t>(l.kind))
            throw WeightFileError(WeightErrorKind::architecture, "layer " + std::to_string(i) + " kind mismatch");
        if (l.kind == LayerKind::dropout) {
            if (ndims != 1) throw WeightFileError(WeightErrorKind::architecture, "bad dropout descriptor");
            const double rate = std::bit_cast<float>(dims[0]);
            if (!(rate >= 0.0 && rate < 1.0))
                throw WeightFileError(WeightErrorKind::architecture, "dropout rate out of range");
            (i < kLastConvLayer + 4 ? cfg.conv_dropout : cfg.dense_dropout) = rate;
        } else if (dims != detail::descriptor_dims(reference, i)) {
            throw WeightFileError(WeightErrorKind::architecture, "layer " + std::to_string(i) + " shape mismatch");
        }
    }

    OctNet net(cfg);
    const std::size_t payload_bytes = net.param_count() * 4;
    const std::uint8_t* payload = r.take(payload_bytes);
    const std::uint32_t stored_crc = r.u32();
    if (r.pos() != bytes.size())
        throw WeightFileError(WeightErrorKind::truncated, "trailing bytes after weight file checksum");
    if (crc32_of(payload, payload_bytes) != stored_crc)
        throw WeightFileError(WeightErrorKind::checksum, "weight file checksum mismatch");
    std::size_t off = 0;
    for (auto& p : net.params())
        for (auto& v : p.data()) {
            std::uint32_t bits = 0;
            for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(payload[off + k]) << (8 * k);
            v = std::bit_cast<float>(bits);
            off += 4;
        }
    return net;
}

inline void save_weights(const OctNet& net, const std::filesystem::path& path) {
    const auto bytes = serialize_weights(net);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw WeightFileError(WeightErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw WeightFileError(WeightErrorKind::io, "write failed: " + path.string());
}

inline OctNet load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WeightFileError(WeightErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_weights(bytes);
}

// Payload (parameter bytes) size for a given net.
inline std::size_t weight_payload_bytes(const OctNet& net) { return net.param_count() * sizeof(float); }

}  // namespace octx
