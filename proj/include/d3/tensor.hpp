#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "d3/errors.hpp"

namespace d3 {

enum class Precision : std::uint8_t { f32 = 1, f64 = 2 };

/// Round a value through the given precision. Tensors tagged f32 keep every
/// stored value float-representable so that serialization is lossless.
inline double round_to(Precision p, double v) {
    return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

/// Dense row-major numeric array.
///
/// Storage is always double, but tensors tagged `Precision::f32` behave like a
/// genuine 32-bit pipeline: every stored value is float-representable and all
/// reductions over them accumulate in float. All operations traverse indices
/// in ascending order, so results are bit-identical across runs.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape, Precision precision = Precision::f64);

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> values,
                            Precision precision = Precision::f64);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    Precision precision() const { return precision_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    void set(std::size_t i, double v) { data_[i] = round_to(precision_, v); }

    std::size_t dim(std::size_t axis) const;

    /// Row-major reshape; element count must be preserved.
    Tensor reshape(std::vector<std::size_t> shape) const;

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double frobenius_norm() const;

    static std::string shape_string(const std::vector<std::size_t>& shape);

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    Precision precision_ = Precision::f64;
};

/// Deterministic 64-bit generator (splitmix64). The full algorithm is spelled
/// out in the README so other implementations can reproduce identical streams:
/// state += 0x9E3779B97F4A7C15; z = state;
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double next_double();

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    double next_normal();

    /// Uniform integer in [0, n) without modulo bias; n must be > 0.
    std::uint64_t next_below(std::uint64_t n);

    /// Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Derive an independent sub-stream from a root seed. Stream ids are
    /// stable, documented constants (see rng_streams in the README).
    static Rng derive(std::uint64_t seed, std::uint64_t stream);

private:
    std::uint64_t state_;
};

/// Standard matrix product a[m x k] * b[k x n]. Summation runs over k in
/// ascending order; accumulation happens in the tensors' precision.
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2-D cross-correlation (no kernel flip) of a single image.
/// input: [C_in x H x W], kernels: [C_out x C_in x kh x kw].
/// Output height is floor((H + 2*padding - kh) / stride) + 1, same for width.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding);

struct CrossEntropyResult {
    double loss = 0.0;             // mean over the batch
    Tensor grad_logits;            // (softmax - one-hot) / B
};

/// Softmax cross-entropy over logits [B x K] with integer labels, computed
/// with max-subtraction for stability.
CrossEntropyResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Sum (not mean) of per-sample cross-entropy losses; used by evaluation
/// paths that aggregate over many batches before dividing once.
double cross_entropy_sum(const Tensor& logits, const std::vector<int>& labels);

} // namespace d3
