#pragma once

// Dense double-precision tensors with tape-based reverse-mode
// differentiation. Deliberately small: only the operations a compact
// transformer encoder needs, all on 64-bit floats so gradient checks and
// cross-run comparisons can be exact.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "silobert/errors.hpp"
#include "silobert/rng.hpp"

namespace silobert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

/// Shared-ownership handle to a dense array and its optional gradient
/// buffer. Copying a Tensor aliases the underlying storage; clone() makes
/// an independent deep copy.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        validate_shape(shape);
        node_->shape = std::move(shape);
        node_->data.assign(shape_numel(node_->shape), 0.0);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        validate_shape(shape);
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor data length " +
                                 std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<double> data() { return node_->data; }
    std::span<const double> data() const { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }

    /// Gradient buffer, allocated (zeroed) on first access.
    std::span<double> grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
        return node_->grad;
    }

    std::span<const double> grad() const {
        if (node_->grad.empty()) {
            throw ContractError("tensor has no gradient buffer");
        }
        return node_->grad;
    }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Value of a single-element tensor.
    double value() const {
        if (numel() != 1) {
            throw ContractError("value() requires a scalar, got shape " +
                                shape_str(shape()));
        }
        return node_->data[0];
    }

    /// Independent deep copy of the values (gradient buffer not copied).
    Tensor clone() const {
        Tensor out;
        out.node_ = std::make_shared<Node>();
        out.node_->shape = node_->shape;
        out.node_->data = node_->data;
        out.node_->requires_grad = node_->requires_grad;
        return out;
    }

    bool same_storage(const Tensor& other) const {
        return node_ == other.node_;
    }

  private:
    struct Node {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until requested
        bool requires_grad = false;
    };

    static void validate_shape(const Shape& s) {
        for (std::size_t d : s) {
            if (d == 0) throw DimensionError("zero-sized dimension in shape");
        }
    }

    std::shared_ptr<Node> node_;
};

/// Ordered record of executed operations. backward() replays the records
/// in exact reverse execution order. A tape is confined to one thread and
/// is not reused across optimizer steps.
class Tape {
  public:
    void record(const Tensor& output, std::function<void()> backward_fn) {
        records_.push_back(Record{output, std::move(backward_fn)});
    }

    std::size_t size() const { return records_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and accumulates (+=) gradients into every
    /// requires_grad leaf. Repeated calls without zero_grad keep adding one
    /// full gradient per call; op outputs owned by the tape are reset first
    /// so earlier replays do not double-count.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward expects a scalar loss, got shape " +
                                shape_str(loss.shape()));
        }
        for (Record& r : records_) r.output.zero_grad();
        Tensor seed = loss;
        seed.grad()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it)
            it->fn();
    }

  private:
    struct Record {
        Tensor output;
        std::function<void()> fn;
    };

    std::vector<Record> records_;
};

namespace detail {

inline bool same_shape(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic ops. Each returns a fresh tensor and, when any input requires
// gradients, records a closure that routes the output gradient back.
// ---------------------------------------------------------------------------

/// Elementwise sum. Shapes must match, or b may be a rank-1 [n] vector
/// broadcast across the rows of a rank-2 [m,n] tensor (bias add).
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    const bool broadcast =
        a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    if (!broadcast && !detail::same_shape(a, b)) {
        throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
    const auto av = a.data();
    const auto bv = b.data();
    auto ov = out.data();
    if (broadcast) {
        const std::size_t m = a.dim(0), n = a.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                ov[i * n + j] = av[i * n + j] + bv[j];
    } else {
        for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    }
    if (out.requires_grad()) {
        tape.record(out, [a = a, b = b, out = out, broadcast]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            if (a.requires_grad()) {
                auto ag = a.grad();
                for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
            }
            if (b.requires_grad()) {
                auto bg = b.grad();
                if (broadcast) {
                    const std::size_t n = b.numel();
                    for (std::size_t i = 0; i < og.size(); ++i)
                        bg[i % n] += og[i];
                } else {
                    for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
                }
            }
        });
    }
    return out;
}

/// Elementwise product; shapes must match exactly.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (!detail::same_shape(a, b)) {
        throw DimensionError("mul: incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
    const auto av = a.data();
    const auto bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        tape.record(out, [a = a, b = b, out = out]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            const auto av = a.data();
            const auto bv = b.data();
            if (a.requires_grad()) {
                auto ag = a.grad();
                for (std::size_t i = 0; i < og.size(); ++i)
                    ag[i] += og[i] * bv[i];
            }
            if (b.requires_grad()) {
                auto bg = b.grad();
                for (std::size_t i = 0; i < og.size(); ++i)
                    bg[i] += og[i] * av[i];
            }
        });
    }
    return out;
}

inline Tensor scalar_mul(Tape& tape, const Tensor& a, double c) {
    Tensor out(a.shape(), a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out, c]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * c;
        });
    }
    return out;
}

/// Matrix product of [m,k] x [k,n]. Gradients: dA = dC*B^T, dB = A^T*dC.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " +
                             shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n}, a.requires_grad() || b.requires_grad());
    {
        const double* ap = a.data().data();
        const double* bp = b.data().data();
        double* op = out.data().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* orow = op + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aik = ap[i * k + p];
                const double* brow = bp + p * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }
    if (out.requires_grad()) {
        tape.record(out, [a = a, b = b, out = out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* og = out.grad().data();
            if (a.requires_grad()) {
                double* ag = a.grad().data();
                const double* bp = b.data().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = og[i * n + j];
                        const double* brow = bp + j;
                        for (std::size_t p = 0; p < k; ++p)
                            ag[i * k + p] += g * brow[p * n];
                    }
            }
            if (b.requires_grad()) {
                double* bg = b.grad().data();
                const double* ap = a.data().data();
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double apv = ap[i * k + p];
                        const double* grow = og + i * n;
                        for (std::size_t j = 0; j < n; ++j)
                            bg[p * n + j] += apv * grow[j];
                    }
            }
        });
    }
    return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError("transpose expects rank 2, got " +
                             shape_str(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out(Shape{n, m}, a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    ag[i * n + j] += og[j * m + i];
        });
    }
    return out;
}

inline Tensor reshape(Tape& tape, const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) +
                             " as " + shape_str(new_shape));
    }
    Tensor out(std::move(new_shape),
               std::vector<double>(a.data().begin(), a.data().end()),
               a.requires_grad());
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        });
    }
    return out;
}

/// Rows [r0, r1) of a rank-2 tensor.
inline Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t r0,
                         std::size_t r1) {
    if (a.rank() != 2 || r0 >= r1 || r1 > a.dim(0)) {
        throw DimensionError("slice_rows: invalid range [" +
                             std::to_string(r0) + "," + std::to_string(r1) +
                             ") for shape " + shape_str(a.shape()));
    }
    const std::size_t n = a.dim(1);
    Tensor out(Shape{r1 - r0, n}, a.requires_grad());
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                (r1 - r0) * n, out.data().begin());
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out, r0, n]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[r0 * n + i] += og[i];
        });
    }
    return out;
}

/// Columns [c0, c1) of a rank-2 tensor.
inline Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t c0,
                         std::size_t c1) {
    if (a.rank() != 2 || c0 >= c1 || c1 > a.dim(1)) {
        throw DimensionError("slice_cols: invalid range [" +
                             std::to_string(c0) + "," + std::to_string(c1) +
                             ") for shape " + shape_str(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
    Tensor out(Shape{m, w}, a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = av[i * n + c0 + j];
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out, c0, m, n, w]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    ag[i * n + c0 + j] += og[i * w + j];
        });
    }
    return out;
}

/// Horizontal concatenation of rank-2 tensors with equal row counts.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = parts.front().dim(0);
    std::size_t total = 0;
    bool needs_grad = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) {
            throw DimensionError("concat_cols: row mismatch at shape " +
                                 shape_str(p.shape()));
        }
        total += p.dim(1);
        needs_grad = needs_grad || p.requires_grad();
    }
    Tensor out(Shape{m, total}, needs_grad);
    auto ov = out.data();
    std::size_t col = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        const auto pv = p.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                ov[i * total + col + j] = pv[i * w + j];
        col += w;
    }
    if (needs_grad) {
        tape.record(out, [parts = parts, out = out, m, total]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            std::size_t col = 0;
            for (Tensor& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    auto pg = p.grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            pg[i * w + j] += og[i * total + col + j];
                }
                col += w;
            }
        });
    }
    return out;
}

/// Sum of all elements.
inline Tensor sum(Tape& tape, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s, a.requires_grad());
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            auto ag = a.grad();
            for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g;
        });
    }
    return out;
}

inline Tensor tanh(Tape& tape, const Tensor& a) {
    Tensor out(a.shape(), a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = std::tanh(av[i]);
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            const auto ov = out.data();
            auto ag = a.grad();
            for (std::size_t i = 0; i < og.size(); ++i)
                ag[i] += og[i] * (1.0 - ov[i] * ov[i]);
        });
    }
    return out;
}

/// GELU with the tanh approximation used by the original BERT release.
inline Tensor gelu(Tape& tape, const Tensor& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Tensor out(a.shape(), a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double x = av[i];
        ov[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            const auto av = a.data();
            auto ag = a.grad();
            for (std::size_t i = 0; i < og.size(); ++i) {
                const double x = av[i];
                const double u = kC * (x + kA * x * x * x);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * x * x);
                ag[i] += og[i] *
                         (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
            }
        });
    }
    return out;
}

/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor,
/// computed with max subtraction so magnitude-1e3 inputs do not overflow.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
    if (a.rank() < 1 || a.rank() > 2) {
        throw DimensionError("softmax_rows expects rank 1 or 2, got " +
                             shape_str(a.shape()));
    }
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    Tensor out(a.shape(), a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        double* y = ov.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= z;
    }
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out, rows, n]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            const auto ov = out.data();
            auto ag = a.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = ov.data() + r * n;
                const double* g = og.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < n; ++j)
                    ag[r * n + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

/// Layer normalization over the last axis with population variance,
/// followed by the affine transform gain * x_hat + bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-12) {
    if (x.rank() < 1 || x.rank() > 2) {
        throw DimensionError("layer_norm expects rank 1 or 2, got " +
                             shape_str(x.shape()));
    }
    const std::size_t h = x.shape().back();
    if (gain.numel() != h || bias.numel() != h) {
        throw DimensionError("layer_norm: gain/bias must have length " +
                             std::to_string(h));
    }
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / h;
    const bool needs_grad =
        x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    Tensor out(x.shape(), needs_grad);
    // inv_std and normalized values are needed by the backward pass
    Tensor xhat(x.shape());
    Tensor inv_std(Shape{rows});
    {
        const auto xv = x.data();
        const auto gv = gain.data();
        const auto bv = bias.data();
        auto ov = out.data();
        auto hv = xhat.data();
        auto sv = inv_std.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = xv.data() + r * h;
            double mean = 0.0;
            for (std::size_t j = 0; j < h; ++j) mean += row[j];
            mean /= static_cast<double>(h);
            double var = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
                const double d = row[j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(h);
            const double is = 1.0 / std::sqrt(var + eps);
            sv[r] = is;
            for (std::size_t j = 0; j < h; ++j) {
                const double xh = (row[j] - mean) * is;
                hv[r * h + j] = xh;
                ov[r * h + j] = gv[j] * xh + bv[j];
            }
        }
    }
    if (needs_grad) {
        tape.record(out, [x = x, gain = gain, bias = bias, out = out, xhat, inv_std, rows, h]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            const auto hv = xhat.data();
            const auto sv = inv_std.data();
            const auto gv = gain.data();
            if (gain.requires_grad()) {
                auto gg = gain.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < h; ++j)
                        gg[j] += og[r * h + j] * hv[r * h + j];
            }
            if (bias.requires_grad()) {
                auto bg = bias.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < h; ++j) bg[j] += og[r * h + j];
            }
            if (x.requires_grad()) {
                auto xg = x.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_gy = 0.0, mean_gyx = 0.0;
                    for (std::size_t j = 0; j < h; ++j) {
                        const double gy = og[r * h + j] * gv[j];
                        mean_gy += gy;
                        mean_gyx += gy * hv[r * h + j];
                    }
                    mean_gy /= static_cast<double>(h);
                    mean_gyx /= static_cast<double>(h);
                    for (std::size_t j = 0; j < h; ++j) {
                        const double gy = og[r * h + j] * gv[j];
                        xg[r * h + j] += (gy - mean_gy -
                                          hv[r * h + j] * mean_gyx) *
                                         sv[r];
                    }
                }
            }
        });
    }
    return out;
}

/// Gathers rows of an embedding table: out[i] = table[ids[i]].
inline Tensor embedding_lookup(Tape& tape, const Tensor& table,
                               std::span<const int> ids) {
    if (table.rank() != 2) {
        throw DimensionError("embedding_lookup: table must be rank 2, got " +
                             shape_str(table.shape()));
    }
    const std::size_t v = table.dim(0), h = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IndexError("embedding_lookup: id " + std::to_string(id) +
                             " out of range [0," + std::to_string(v) + ")");
        }
    }
    Tensor out(Shape{ids.size(), h}, table.requires_grad());
    const auto tv = table.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(
                                     static_cast<std::size_t>(ids[i]) * h),
                    h, ov.begin() + static_cast<std::ptrdiff_t>(i * h));
    }
    if (out.requires_grad()) {
        std::vector<int> ids_copy(ids.begin(), ids.end());
        tape.record(out, [table = table, out = out, ids_copy, h]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            auto tg = table.grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                const std::size_t row = static_cast<std::size_t>(ids_copy[i]);
                for (std::size_t j = 0; j < h; ++j)
                    tg[row * h + j] += og[i * h + j];
            }
        });
    }
    return out;
}

/// Mean negative log-likelihood of targets under row-wise log-softmax of
/// logits [n, C]. Rows whose target equals ignore_index are excluded from
/// the mean; if every row is ignored the loss is a detached zero.
inline Tensor cross_entropy_logits(Tape& tape, const Tensor& logits,
                                   std::span<const int> targets,
                                   int ignore_index = -1) {
    if (logits.rank() != 2) {
        throw DimensionError("cross_entropy_logits: logits must be rank 2, got " +
                             shape_str(logits.shape()));
    }
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (targets.size() != n) {
        throw ContractError("cross_entropy_logits: " + std::to_string(n) +
                            " rows but " + std::to_string(targets.size()) +
                            " targets");
    }
    std::size_t count = 0;
    double total = 0.0;
    const auto lv = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] == ignore_index) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
            throw IndexError("cross_entropy_logits: target " +
                             std::to_string(targets[i]) + " out of range [0," +
                             std::to_string(c) + ")");
        }
        const double* row = lv.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        total += std::log(z) + mx - row[static_cast<std::size_t>(targets[i])];
        ++count;
    }
    if (count == 0) return Tensor::scalar(0.0);
    Tensor out = Tensor::scalar(total / static_cast<double>(count),
                                logits.requires_grad());
    if (out.requires_grad()) {
        std::vector<int> tg_copy(targets.begin(), targets.end());
        tape.record(out, [logits = logits, out = out, tg_copy, n, c, ignore_index,
                     count]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] / static_cast<double>(count);
            const auto lv = logits.data();
            auto lg = logits.grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (tg_copy[i] == ignore_index) continue;
                const double* row = lv.data() + i * c;
                double mx = row[0];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
                for (std::size_t j = 0; j < c; ++j) {
                    double p = std::exp(row[j] - mx) / z;
                    if (j == static_cast<std::size_t>(tg_copy[i])) p -= 1.0;
                    lg[i * c + j] += g * p;
                }
            }
        });
    }
    return out;
}

/// Inverted dropout with a per-call seed so training runs replay exactly.
/// p == 0 returns the input unchanged; callers skip the op in eval mode.
inline Tensor dropout(Tape& tape, const Tensor& a, double p,
                      std::uint64_t seed) {
    if (p < 0.0 || p >= 1.0) {
        throw ContractError("dropout: p must be in [0,1), got " +
                            std::to_string(p));
    }
    if (p == 0.0) return a;
    Rng rng(seed);
    const double scale = 1.0 / (1.0 - p);
    Tensor mask(a.shape());
    auto mv = mask.data();
    for (std::size_t i = 0; i < mv.size(); ++i)
        mv[i] = rng.bernoulli(p) ? 0.0 : scale;
    Tensor out(a.shape(), a.requires_grad());
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * mv[i];
    if (out.requires_grad()) {
        tape.record(out, [a = a, out = out, mask]() mutable {
            if (!out.has_grad()) return;
            const auto og = out.grad();
            const auto mv = mask.data();
            auto ag = a.grad();
            for (std::size_t i = 0; i < og.size(); ++i)
                ag[i] += og[i] * mv[i];
        });
    }
    return out;
}

}  // namespace silobert
