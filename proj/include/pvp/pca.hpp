#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "pvp/common.hpp"

namespace pvp {

struct PcaResult {
    std::vector<double> mean;
    std::array<std::vector<double>, 2> components;
    std::array<double, 2> eigenvalues{};
    std::array<double, 2> explained{};  // fraction of total variance
    std::vector<std::array<double, 2>> coords;
};

namespace detail {

inline double norm2(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

inline void orthonormalize(std::vector<double>& v, const std::vector<double>* against) {
    if (against != nullptr) {
        double dp = 0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            dp += v[i] * (*against)[i];
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] -= dp * (*against)[i];
        }
    }
    const double n = norm2(v);
    for (double& x : v) {
        x /= n;
    }
}

inline void fix_sign(std::vector<double>& v) {
    for (double x : v) {
        if (x != 0.0) {
            if (x < 0) {
                for (double& y : v) {
                    y = -y;
                }
            }
            return;
        }
    }
}

inline std::vector<double> start_vector(std::size_t d) {
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) {
        v[i] = 1.0 + static_cast<double>(i) / static_cast<double>(d);
    }
    return v;
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration, kept
/// orthogonal to `against` when given.
inline std::pair<double, std::vector<double>> power_iteration(const std::vector<double>& m, std::size_t d,
                                                              const std::vector<double>* against, double tol,
                                                              int max_iter) {
    auto v = start_vector(d);
    orthonormalize(v, against);
    std::vector<double> w(d);
    double lambda = 0;
    for (int it = 0; it < max_iter; ++it) {
        for (std::size_t i = 0; i < d; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) {
                s += m[i * d + j] * v[j];
            }
            w[i] = s;
        }
        double rq = 0;
        for (std::size_t i = 0; i < d; ++i) {
            rq += v[i] * w[i];
        }
        lambda = std::max(0.0, rq);
        if (against != nullptr) {
            double dp = 0;
            for (std::size_t i = 0; i < d; ++i) {
                dp += w[i] * (*against)[i];
            }
            for (std::size_t i = 0; i < d; ++i) {
                w[i] -= dp * (*against)[i];
            }
        }
        const double n = norm2(w);
        if (n <= 1e-300) {
            return {0.0, v};  // v spans (numerically) null directions
        }
        double delta = 0;
        for (std::size_t i = 0; i < d; ++i) {
            w[i] /= n;
            delta = std::max(delta, std::abs(w[i] - v[i]));
        }
        v.swap(w);
        if (delta < tol) {
            break;
        }
    }
    return {lambda, v};
}

}  // namespace detail

inline constexpr double kPcaTolerance = 1e-10;

/// Top-two principal components of `points` via power iteration with deflation.
inline PcaResult pca_project(const std::vector<std::vector<double>>& points) {
    require(points.size() >= 3, ErrorKind::argument, "PCA needs at least 3 vectors");
    const std::size_t n = points.size();
    const std::size_t d = points.front().size();
    require(d >= 2, ErrorKind::argument, "PCA needs vectors of dimension at least 2");
    bool identical = true;
    for (const auto& p : points) {
        require(p.size() == d, ErrorKind::shape, "PCA input vectors differ in length");
        identical = identical && p == points.front();
    }
    require(!identical, ErrorKind::degenerate_input, "PCA input vectors are all identical");

    PcaResult r;
    r.mean.assign(d, 0.0);
    for (const auto& p : points) {
        for (std::size_t i = 0; i < d; ++i) {
            r.mean[i] += p[i];
        }
    }
    for (double& m : r.mean) {
        m /= static_cast<double>(n);
    }
    std::vector<double> cov(d * d, 0.0);
    std::vector<double> c(d);
    for (const auto& p : points) {
        for (std::size_t i = 0; i < d; ++i) {
            c[i] = p[i] - r.mean[i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    double total = 0;
    for (std::size_t i = 0; i < d * d; ++i) {
        cov[i] /= static_cast<double>(n - 1);
    }
    for (std::size_t i = 0; i < d; ++i) {
        total += cov[i * d + i];
    }
    require(total > 0, ErrorKind::degenerate_input, "PCA input has zero variance");

    constexpr int kMaxIter = 200000;
    auto [l1, v1] = detail::power_iteration(cov, d, nullptr, kPcaTolerance, kMaxIter);
    // deflate
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    auto [l2, v2] = detail::power_iteration(cov, d, &v1, kPcaTolerance, kMaxIter);
    detail::orthonormalize(v2, &v1);
    detail::fix_sign(v1);
    detail::fix_sign(v2);
    l2 = std::min(l2, l1);
    r.components = {v1, v2};
    r.eigenvalues = {l1, l2};
    r.explained = {l1 / total, l2 / total};
    r.coords.reserve(n);
    for (const auto& p : points) {
        std::array<double, 2> xy{0, 0};
        for (std::size_t i = 0; i < d; ++i) {
            const double ci = p[i] - r.mean[i];
            xy[0] += ci * v1[i];
            xy[1] += ci * v2[i];
        }
        r.coords.push_back(xy);
    }
    return r;
}

}  // namespace pvp
