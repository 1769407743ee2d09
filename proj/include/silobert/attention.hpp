#pragma once

// Post-hoc attention-head analysis over a fixed probe corpus: per-head
// mean entropy, Spearman correlation between models' entropy profiles,
// head-pair Jensen-Shannon divergence matrices, distances between those
// matrices, and a classical-MDS 2-D projection. All logarithms natural.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "silobert/errors.hpp"
#include "silobert/model.hpp"
#include "silobert/tensor.hpp"

namespace silobert {

namespace detail {

inline double row_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

/// Attention row restricted to non-padding key columns. Masked columns
/// carry exactly zero mass, so the restriction still sums to one.
inline std::vector<double> valid_row(const AttentionCapture& cap,
                                     std::size_t layer, std::size_t head,
                                     std::size_t pos) {
    const auto full = cap.row(layer, head, pos);
    std::vector<double> out;
    out.reserve(cap.seq_len);
    for (std::size_t j = 0; j < cap.seq_len; ++j) {
        if (cap.attn_mask[j]) out.push_back(full[j]);
    }
    return out;
}

}  // namespace detail

/// Mean attention entropy per head, averaged over every non-padding query
/// position of every probe sequence. Shape [num_layers, num_heads].
inline Tensor head_entropy(std::span<const AttentionCapture> captures) {
    if (captures.empty()) throw ContractError("head_entropy: no captures");
    const std::size_t layers = captures.front().num_layers;
    const std::size_t heads = captures.front().num_heads;
    Tensor out(Shape{layers, heads});
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t a = 0; a < heads; ++a) {
            double total = 0.0;
            std::size_t count = 0;
            for (const AttentionCapture& cap : captures) {
                for (std::size_t i = 0; i < cap.seq_len; ++i) {
                    if (!cap.attn_mask[i]) continue;
                    total += detail::row_entropy(detail::valid_row(cap, l, a, i));
                    ++count;
                }
            }
            out.data()[l * heads + a] =
                count == 0 ? 0.0 : total / static_cast<double>(count);
        }
    }
    return out;
}

/// Spearman rank correlation with average ranks on ties. Returns nullopt
/// when either input has zero rank variance (correlation undefined).
inline std::optional<double> spearman(std::span<const double> a,
                                      std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw ContractError("spearman: inputs must have equal length >= 2");
    }
    auto ranks = [](std::span<const double> x) {
        const std::size_t n = x.size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
            const double avg = (static_cast<double>(i) +
                                static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t q = i; q <= j; ++q) r[order[q]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return std::nullopt;
    return cov / std::sqrt(va * vb);
}

/// Jensen-Shannon divergence with natural log, bounded by ln 2.
inline double jsd(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) {
        throw ContractError("jsd: distributions must have equal nonzero size");
    }
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < -1e-12 || q[i] < -1e-12) {
            throw ContractError("jsd: negative probability");
        }
        sp += p[i];
        sq += q[i];
    }
    if (std::fabs(sp - 1.0) > 1e-9 || std::fabs(sq - 1.0) > 1e-9) {
        throw ContractError("jsd: inputs must sum to 1 within 1e-9");
    }
    double dpm = 0.0, dqm = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) dpm += p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) dqm += q[i] * std::log(q[i] / m);
    }
    return 0.5 * dpm + 0.5 * dqm;
}

/// Symmetric [(L*A), (L*A)] matrix whose (i, j) entry is the mean JSD
/// between head i's and head j's attention rows at the same probe
/// positions. Diagonal is exactly zero.
inline Tensor jsd_head_matrix(std::span<const AttentionCapture> captures) {
    if (captures.empty()) throw ContractError("jsd_head_matrix: no captures");
    const std::size_t layers = captures.front().num_layers;
    const std::size_t heads = captures.front().num_heads;
    const std::size_t n = layers * heads;
    Tensor out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double total = 0.0;
            std::size_t count = 0;
            for (const AttentionCapture& cap : captures) {
                for (std::size_t pos = 0; pos < cap.seq_len; ++pos) {
                    if (!cap.attn_mask[pos]) continue;
                    const auto pi = detail::valid_row(cap, i / heads,
                                                      i % heads, pos);
                    const auto pj = detail::valid_row(cap, j / heads,
                                                      j % heads, pos);
                    total += jsd(pi, pj);
                    ++count;
                }
            }
            const double mean =
                count == 0 ? 0.0 : total / static_cast<double>(count);
            out.data()[i * n + j] = mean;
            out.data()[j * n + i] = mean;
        }
    }
    return out;
}

enum class DistanceMode { kMean, kSum };

/// Distance between two equally sized matrices: the mean (or sum) of the
/// absolute elementwise difference over all entries.
inline double model_distance(const Tensor& a, const Tensor& b,
                             DistanceMode mode = DistanceMode::kMean) {
    if (a.shape() != b.shape()) {
        throw ContractError("model_distance: dimension mismatch " +
                            shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        total += std::fabs(a.data()[i] - b.data()[i]);
    }
    return mode == DistanceMode::kSum
               ? total
               : total / static_cast<double>(a.numel());
}

namespace detail {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Values and
/// row-major eigenvectors (one per column) to near machine precision.
inline void jacobi_eigen(std::vector<double> a, std::size_t n,
                         std::vector<double>& values,
                         std::vector<double>& vectors) {
    vectors.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) vectors[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                off += a[i * n + j] * a[i * n + j];
        if (off < 1e-28) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double theta =
                    (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t =
                    (theta >= 0.0 ? 1.0 : -1.0) /
                    (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p];
                    const double aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i];
                    const double aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = vectors[i * n + p];
                    const double viq = vectors[i * n + q];
                    vectors[i * n + p] = c * vip - s * viq;
                    vectors[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    values.resize(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = a[i * n + i];
}

}  // namespace detail

/// Classical multidimensional scaling of a symmetric zero-diagonal
/// distance matrix onto 2 dimensions: double-center -1/2 J D^2 J, take the
/// top two eigenpairs, and scale eigenvectors by sqrt(eigenvalue).
/// Non-positive eigenvalues yield a zero coordinate.
inline Tensor mds_project_2d(const Tensor& distances) {
    if (distances.rank() != 2 || distances.dim(0) != distances.dim(1)) {
        throw ContractError("mds_project_2d: matrix must be square");
    }
    const std::size_t n = distances.dim(0);
    const auto d = distances.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (std::fabs(d[i * n + i]) > 1e-12) {
            throw ContractError("mds_project_2d: diagonal must be zero");
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (d[i * n + j] < 0.0) {
                throw ContractError("mds_project_2d: negative distance");
            }
            if (std::fabs(d[i * n + j] - d[j * n + i]) > 1e-9) {
                throw ContractError("mds_project_2d: matrix not symmetric");
            }
        }
    }
    // B = -1/2 J D^2 J via row/column/grand means of squared distances
    std::vector<double> sq(n * n);
    for (std::size_t i = 0; i < n * n; ++i) sq[i] = d[i] * d[i];
    std::vector<double> row_mean(n, 0.0);
    double grand = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) row_mean[i] += sq[i * n + j];
        row_mean[i] /= static_cast<double>(n);
        grand += row_mean[i];
    }
    grand /= static_cast<double>(n);
    std::vector<double> b(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            b[i * n + j] = -0.5 * (sq[i * n + j] - row_mean[i] -
                                   row_mean[j] + grand);

    std::vector<double> values, vectors;
    detail::jacobi_eigen(std::move(b), n, values, vectors);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        return values[i] > values[j];
    });

    Tensor points(Shape{n, 2});
    for (std::size_t axis = 0; axis < 2 && axis < n; ++axis) {
        const std::size_t e = order[axis];
        if (values[e] <= 1e-12 * std::max(1.0, values[order[0]])) continue;
        const double scale = std::sqrt(values[e]);
        for (std::size_t i = 0; i < n; ++i)
            points.data()[i * 2 + axis] = vectors[i * n + e] * scale;
    }
    return points;
}

/// Everything the cross-model report needs about one model's heads.
struct AttentionProfile {
    std::string model_tag;
    Tensor entropy;     // [num_layers, num_heads]
    Tensor jsd_matrix;  // [(L*A), (L*A)]
};

inline AttentionProfile profile_attention(
    std::string model_tag, std::span<const AttentionCapture> captures) {
    AttentionProfile profile;
    profile.model_tag = std::move(model_tag);
    profile.entropy = head_entropy(captures);
    profile.jsd_matrix = jsd_head_matrix(captures);
    return profile;
}

}  // namespace silobert
