#include "d3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>

namespace d3 {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) {
            throw DimensionError("tensor dimensions must be positive, got shape " +
                                 Tensor::shape_string(shape));
        }
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape, Precision precision)
    : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0), precision_(precision) {}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> values,
                         Precision precision) {
    std::size_t n = checked_numel(shape);
    if (n != values.size()) {
        throw DimensionError("tensor shape " + shape_string(shape) + " expects " +
                             std::to_string(n) + " values, got " + std::to_string(values.size()));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    t.precision_ = precision;
    if (precision == Precision::f32) {
        for (double& v : t.data_) v = round_to(Precision::f32, v);
    }
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_string(shape_));
    }
    return shape_[axis];
}

Tensor Tensor::reshape(std::vector<std::size_t> shape) const {
    if (checked_numel(shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                             shape_string(shape));
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::frobenius_norm() const {
    if (precision_ == Precision::f32) {
        float acc = 0.0f;
        for (double v : data_) {
            float f = static_cast<float>(v);
            acc += f * f;
        }
        return static_cast<double>(std::sqrt(acc));
    }
    double acc = 0.0;
    for (double v : data_) acc += v * v;
    return std::sqrt(acc);
}

std::string Tensor::shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

std::uint64_t Rng::next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_normal() {
    double u1 = next_double();
    double u2 = next_double();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

std::uint64_t Rng::next_below(std::uint64_t n) {
    if (n == 0) throw ContractError("next_below requires n > 0");
    std::uint64_t threshold = (0ULL - n) % n;
    for (;;) {
        std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
    Rng mixer(seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
    return Rng(mixer.next_u64());
}

// ---------------------------------------------------------------------------
// Kernels. Each is templated on the accumulator type so that f32 tensors get
// true float accumulation while f64 tensors run in double.
// ---------------------------------------------------------------------------

namespace {

Precision common_precision(const Tensor& a, const Tensor& b, const char* op) {
    if (a.precision() != b.precision()) {
        throw ContractError(std::string(op) + ": mixed tensor precisions");
    }
    return a.precision();
}

template <typename Acc>
void matmul_kernel(const Tensor& a, const Tensor& b, Tensor& out, std::size_t m, std::size_t k,
                   std::size_t n) {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    std::vector<Acc> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), Acc(0));
        const double* arow = pa + i * k;
        // For each output element the contributions arrive in ascending-k
        // order, same as the naive triple loop.
        for (std::size_t kk = 0; kk < k; ++kk) {
            Acc aik = static_cast<Acc>(arow[kk]);
            const double* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += aik * static_cast<Acc>(brow[j]);
            }
        }
        for (std::size_t j = 0; j < n; ++j) po[i * n + j] = static_cast<double>(row[j]);
    }
}

template <typename Acc>
void conv2d_kernel(const Tensor& input, const Tensor& kernels, Tensor& out, std::size_t stride,
                   std::size_t padding) {
    const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t c_out = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const std::size_t ho = out.dim(1), wo = out.dim(2);
    const double* px = input.data();
    const double* pk = kernels.data();
    double* po = out.data();
    const long long pad = static_cast<long long>(padding);
    for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                Acc acc = Acc(0);
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    const double* xplane = px + ci * h * w;
                    const double* kplane = pk + ((co * c_in + ci) * kh) * kw;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        long long iy = static_cast<long long>(oy * stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            long long ix = static_cast<long long>(ox * stride + kx) - pad;
                            if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                            acc += static_cast<Acc>(xplane[iy * static_cast<long long>(w) + ix]) *
                                   static_cast<Acc>(kplane[ky * kw + kx]);
                        }
                    }
                }
                po[(co * ho + oy) * wo + ox] = static_cast<double>(acc);
            }
        }
    }
}

template <typename Acc>
double xent_kernel(const Tensor& logits, const std::vector<int>& labels, Tensor* grad, bool mean) {
    const std::size_t batch = logits.dim(0), k = logits.dim(1);
    const double* pl = logits.data();
    double* pg = grad ? grad->data() : nullptr;
    const Acc inv_b = Acc(1) / static_cast<Acc>(batch);
    Acc total = Acc(0);
    for (std::size_t i = 0; i < batch; ++i) {
        int label = labels[i];
        const double* row = pl + i * k;
        Acc mx = static_cast<Acc>(row[0]);
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<Acc>(row[j]));
        Acc z = Acc(0);
        for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<Acc>(row[j]) - mx);
        Acc log_z = std::log(z);
        total += -(static_cast<Acc>(row[label]) - mx - log_z);
        if (pg) {
            for (std::size_t j = 0; j < k; ++j) {
                Acc p = std::exp(static_cast<Acc>(row[j]) - mx) / z;
                if (static_cast<int>(j) == label) p -= Acc(1);
                pg[i * k + j] = static_cast<double>(p * inv_b);
            }
        }
    }
    if (mean) total *= inv_b;
    return static_cast<double>(total);
}

void check_labels(const std::vector<int>& labels, std::size_t batch, std::size_t k) {
    if (labels.size() != batch) {
        throw ContractError("label count " + std::to_string(labels.size()) +
                            " does not match batch size " + std::to_string(batch));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            throw IndexError("label " + std::to_string(labels[i]) + " at position " +
                             std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul expects rank-2 tensors, got " +
                             Tensor::shape_string(a.shape()) + " and " +
                             Tensor::shape_string(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul inner dimensions disagree: " +
                             Tensor::shape_string(a.shape()) + " vs " +
                             Tensor::shape_string(b.shape()));
    }
    Precision p = common_precision(a, b, "matmul");
    Tensor out({a.dim(0), b.dim(1)}, p);
    if (p == Precision::f32) {
        matmul_kernel<float>(a, b, out, a.dim(0), a.dim(1), b.dim(1));
    } else {
        matmul_kernel<double>(a, b, out, a.dim(0), a.dim(1), b.dim(1));
    }
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t padding) {
    if (input.rank() != 3 || kernels.rank() != 4) {
        throw DimensionError("conv2d expects input [C,H,W] and kernels [Co,Ci,kh,kw], got " +
                             Tensor::shape_string(input.shape()) + " and " +
                             Tensor::shape_string(kernels.shape()));
    }
    if (stride < 1) throw ContractError("conv2d stride must be >= 1");
    if (kernels.dim(1) != input.dim(0)) {
        throw DimensionError("conv2d channel mismatch: input " +
                             Tensor::shape_string(input.shape()) + " vs kernels " +
                             Tensor::shape_string(kernels.shape()));
    }
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t kh = kernels.dim(2), kw = kernels.dim(3);
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw DimensionError("conv2d kernel " + Tensor::shape_string(kernels.shape()) +
                             " larger than padded input " + Tensor::shape_string(input.shape()) +
                             " (padding " + std::to_string(padding) + ")");
    }
    const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
    const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
    Precision p = common_precision(input, kernels, "conv2d");
    Tensor out({kernels.dim(0), ho, wo}, p);
    if (p == Precision::f32) {
        conv2d_kernel<float>(input, kernels, out, stride, padding);
    } else {
        conv2d_kernel<double>(input, kernels, out, stride, padding);
    }
    return out;
}

CrossEntropyResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        throw DimensionError("softmax_cross_entropy expects logits [B,K], got " +
                             Tensor::shape_string(logits.shape()));
    }
    check_labels(labels, logits.dim(0), logits.dim(1));
    CrossEntropyResult res;
    res.grad_logits = Tensor(logits.shape(), logits.precision());
    if (logits.precision() == Precision::f32) {
        res.loss = xent_kernel<float>(logits, labels, &res.grad_logits, true);
    } else {
        res.loss = xent_kernel<double>(logits, labels, &res.grad_logits, true);
    }
    return res;
}

double cross_entropy_sum(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        throw DimensionError("cross_entropy_sum expects logits [B,K], got " +
                             Tensor::shape_string(logits.shape()));
    }
    check_labels(labels, logits.dim(0), logits.dim(1));
    if (logits.precision() == Precision::f32) {
        return xent_kernel<float>(logits, labels, nullptr, false);
    }
    return xent_kernel<double>(logits, labels, nullptr, false);
}

} // namespace d3
