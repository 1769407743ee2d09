#pragma once

// Checkpoint file format:
//   magic "FCRP1\0"
//   entry count   u32 LE
//   per entry:    name length u32 LE, UTF-8 name, rank u32 LE,
//                 dims u32 LE each, payload f64 LE row-major
// Round trips are bit-exact.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "silobert/errors.hpp"
#include "silobert/model.hpp"
#include "silobert/tensor.hpp"

namespace silobert {

namespace detail {

constexpr std::array<char, 6> kCheckpointMagic = {'F', 'C', 'R', 'P', '1', '\0'};

inline void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
    buf.push_back(static_cast<char>((v >> 16) & 0xFF));
    buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_f64(std::string& buf, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i)
        buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
  public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(
                     static_cast<unsigned char>(bytes_[pos_ + i]))
                 << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8, "f64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(
                     static_cast<unsigned char>(bytes_[pos_ + i]))
                 << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

    std::string str(std::size_t n) {
        need(n, "name");
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

  private:
    void need(std::size_t n, const char* what) const {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(std::string("checkpoint truncated while reading ") +
                              what);
        }
    }

    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const ParamSet& params,
                            const std::filesystem::path& path) {
    std::string buf;
    buf.append(detail::kCheckpointMagic.data(), detail::kCheckpointMagic.size());
    detail::put_u32(buf, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params.entries()) {
        detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
        detail::put_u32(buf, static_cast<std::uint32_t>(tensor.rank()));
        for (std::size_t d : tensor.shape())
            detail::put_u32(buf, static_cast<std::uint32_t>(d));
        for (double v : tensor.data()) detail::put_f64(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open checkpoint for writing: " +
                          path.string());
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("checkpoint write failed: " + path.string());
}

/// Loads a checkpoint; tensors come back marked requires_grad so training
/// can continue from them.
inline ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    detail::Reader r(std::move(bytes));
    const std::string magic = r.str(detail::kCheckpointMagic.size());
    if (!std::equal(magic.begin(), magic.end(),
                    detail::kCheckpointMagic.begin())) {
        throw FormatError("checkpoint magic mismatch in " + path.string());
    }
    const std::uint32_t count = r.u32();
    ParamSet params;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = r.u32();
            if (shape[i] == 0) {
                throw FormatError("checkpoint entry " + name +
                                  " has a zero dimension");
            }
            numel *= shape[i];
        }
        std::vector<double> values(numel);
        for (double& v : values) v = r.f64();
        params.add(std::move(name), Tensor(std::move(shape), std::move(values),
                                           /*requires_grad=*/true));
    }
    if (!r.at_end()) {
        throw FormatError("checkpoint has trailing bytes: " + path.string());
    }
    return params;
}

}  // namespace silobert
