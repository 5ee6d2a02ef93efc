#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pvp {

// ----------------------------- errors -----------------------------

enum class ErrorKind {
    config,
    argument,
    generation,
    vocabulary,
    shape,
    intervention,
    numeric,
    divergence,
    integrity,
    load,
    io,
    evaluation,
    degenerate_input,
    compatibility,
    report,
    missing_artifact,
    stale_artifact,
};

inline std::string_view to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::config: return "configuration error";
        case ErrorKind::argument: return "argument error";
        case ErrorKind::generation: return "generation error";
        case ErrorKind::vocabulary: return "vocabulary error";
        case ErrorKind::shape: return "shape error";
        case ErrorKind::intervention: return "intervention error";
        case ErrorKind::numeric: return "numeric error";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::integrity: return "integrity error";
        case ErrorKind::load: return "load error";
        case ErrorKind::io: return "I/O error";
        case ErrorKind::evaluation: return "evaluation error";
        case ErrorKind::degenerate_input: return "degenerate-input error";
        case ErrorKind::compatibility: return "compatibility error";
        case ErrorKind::report: return "report error";
        case ErrorKind::missing_artifact: return "missing artifact";
        case ErrorKind::stale_artifact: return "stale artifact";
    }
    return "error";
}

/// Every domain failure in the library is a pvp::Error carrying its kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) {
        fail(kind, what);
    }
}

// ----------------------------- rng -----------------------------

/// Seeded generator with distributions written out by hand so streams are
/// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            fail(ErrorKind::argument, "Rng::below(0)");
        }
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    /// Standard normal via Box-Muller (no cached spare, so each call costs two draws).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Derive an independent stream for a keyed sub-task.
    [[nodiscard]] Rng fork(std::uint64_t key) const {
        Rng r(state_ ^ (key * 0xD1342543DE82EF95ULL + 0x2545F4914F6CDD1DULL));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    Rng r(a * 0x9E3779B97F4A7C15ULL ^ (b + 0x632BE59BD9B4E019ULL));
    return r.next_u64();
}

// ----------------------------- hashing -----------------------------

/// Incremental SHA-256 over OpenSSL's EVP interface.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            fail(ErrorKind::io, "sha256 init failed");
        }
    }

    Sha256& update(const void* data, std::size_t n) {
        if (n > 0 && EVP_DigestUpdate(ctx_.get(), data, n) != 1) {
            fail(ErrorKind::io, "sha256 update failed");
        }
        return *this;
    }

    Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

    template <class T>
        requires std::is_arithmetic_v<T>
    Sha256& update_value(T v) {
        return update(&v, sizeof(T));
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    Sha256& update_span(std::span<const T> s) {
        return update(s.data(), s.size_bytes());
    }

    std::string hex() {
        std::array<unsigned char, 32> out{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &len) != 1) {
            fail(ErrorKind::io, "sha256 final failed");
        }
        static constexpr char digits[] = "0123456789abcdef";
        std::string s;
        s.reserve(64);
        for (unsigned i = 0; i < len; ++i) {
            s.push_back(digits[out[i] >> 4]);
            s.push_back(digits[out[i] & 0xF]);
        }
        return s;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex(); }

// ----------------------------- binary io -----------------------------

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts need byte swapping");

inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

inline void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

inline void put_f32s(std::string& out, std::span<const float> v) {
    out.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
}

/// Bounds-checked cursor over a byte buffer.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    std::uint32_t u32() {
        std::uint32_t v = 0;
        std::memcpy(&v, take(4).data(), 4);
        return v;
    }

    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

    void f32s(std::span<float> out) {
        const auto b = take(out.size_bytes());
        std::memcpy(out.data(), b.data(), b.size());
    }

    std::string_view take(std::size_t n) {
        if (n > bytes_.size() - pos_) {
            fail(ErrorKind::load, what_ + ": truncated (wanted " + std::to_string(n) + " bytes at offset " +
                                      std::to_string(pos_) + ")");
        }
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        fail(ErrorKind::load, "cannot open " + p.string());
    }
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        fail(ErrorKind::load, "read failed for " + p.string());
    }
    return s;
}

/// Temp-write then rename, so readers never observe a truncated file.
inline void write_file_atomic(const std::filesystem::path& p, std::string_view bytes) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path(), ec);
    }
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorKind::io, "cannot write " + p.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            fs::remove(tmp, ec);
            fail(ErrorKind::io, "write failed for " + p.string());
        }
    }
    fs::rename(tmp, p, ec);
    if (ec) {
        fs::remove(tmp, ec);
        fail(ErrorKind::io, "rename failed for " + p.string());
    }
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

}  // namespace pvp
