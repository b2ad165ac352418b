// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "matscale/errors.hpp"

namespace matscale {

// Numeric mode of one engine: 64-bit reference or a 32-bit reduced mode in
// which every stored value is rounded through float. True 16-bit storage is
// out of scope.
enum class Precision { high64, reduced32 };

// Running count of floating-point operations, split by operation class.
// Convention: matmul 2*m*n*k, elementwise 1 per primitive per element,
// softmax 4 per element, layernorm 8 per element, reductions 1 per element;
// backward passes are counted by the same rules on their constituent ops.
// Pure lookups and data movement (gather, slice, concat, transpose, reshape)
// count zero.
struct FlopCounter {
    std::uint64_t total{0};
    std::map<std::string, std::uint64_t> per_class;
};

enum class EwOp {
    add,
    sub,
    mul,
    sigmoid,
    silu,
    sin,
    cos,
    square,
    sqrt,
    exp,
    abs,
    neg,
};

namespace detail {
struct Node;
}

class Engine;

// Value handle onto a node of an engine's computation graph. Copying a
// Tensor copies the handle, not the storage.
class Tensor {
public:
    Tensor() = default;

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t rows() const;
    std::size_t cols() const;

    const std::vector<double>& values() const;
    // Direct write access to a leaf's storage (optimizer updates). The graph
    // built from a leaf reads values at forward time, so mutate only between
    // forward passes.
    std::vector<double>& mutable_values();

    double item() const; // requires size() == 1
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

private:
    friend class Engine;
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// Owns one computation graph universe: FLOP accounting, precision mode and
// the reverse-mode pass. An engine and its tensors are confined to a single
// thread; independent engines may run concurrently.
class Engine {
public:
    explicit Engine(Precision mode = Precision::high64) : mode_(mode) {}

    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    Precision precision() const { return mode_; }

    // --- construction ---
    Tensor constant(std::vector<std::size_t> shape, std::vector<double> data);
    Tensor leaf(std::vector<std::size_t> shape, std::vector<double> data);
    Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    Tensor scalar(double v) { return constant({1}, {v}); }

    // --- linear algebra ---
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& a);
    Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);

    // --- elementwise ---
    // Binary ops broadcast right-aligned; a mismatched dimension must be 1.
    Tensor elementwise(EwOp op, const Tensor& a);
    Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
    Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
    Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }
    Tensor sigmoid(const Tensor& a) { return elementwise(EwOp::sigmoid, a); }
    Tensor silu(const Tensor& a) { return elementwise(EwOp::silu, a); }
    Tensor sin(const Tensor& a) { return elementwise(EwOp::sin, a); }
    Tensor cos(const Tensor& a) { return elementwise(EwOp::cos, a); }
    Tensor square(const Tensor& a) { return elementwise(EwOp::square, a); }
    Tensor sqrt(const Tensor& a) { return elementwise(EwOp::sqrt, a); }
    Tensor exp(const Tensor& a) { return elementwise(EwOp::exp, a); }
    Tensor abs(const Tensor& a) { return elementwise(EwOp::abs, a); }
    Tensor neg(const Tensor& a) { return elementwise(EwOp::neg, a); }
    Tensor scale(const Tensor& a, double c);
    Tensor add_scalar(const Tensor& a, double c);

    // --- normalization ---
    Tensor softmax(const Tensor& a, int axis);
    // Normalizes over the last axis; gain and bias are 1-D of that length.
    Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps);

    // --- reductions (keep the reduced dimension as size 1) ---
    Tensor reduce_sum(const Tensor& a, int axis);
    Tensor reduce_mean(const Tensor& a, int axis);
    Tensor sum_all(const Tensor& a);
    Tensor mean_all(const Tensor& a);

    // --- structure ---
    Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices);
    Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
    Tensor concat_rows(const std::vector<Tensor>& parts);

    // Propagates d(loss)/d(leaf) into every requires-grad leaf, accumulating
    // into existing grad buffers. The graph is single-use: a second call on
    // the same graph raises StateError, and interior nodes are unlinked to
    // release memory.
    void backward(const Tensor& loss);

    FlopCounter flops() const;
    std::uint64_t flop_total() const;
    void reset_flops();

    bool flops_paused() const { return flops_paused_; }
    void set_flops_paused(bool p) { flops_paused_ = p; }

private:
    friend class FlopPauseGuard;
    enum class FlopClass : unsigned { matmul = 0, elementwise, softmax, layernorm, reduction, n_classes };

    Tensor make(detail::Node&& n);
    void count(FlopClass c, std::uint64_t n);
    double q(double v) const;
    void quantize(std::vector<double>& v) const;
    void backward_dispatch(detail::Node& n);

    Precision mode_;
    std::uint64_t class_counts_[static_cast<unsigned>(FlopClass::n_classes)] = {0, 0, 0, 0, 0};
    bool flops_paused_{false};
};

// Suspends FLOP accounting for a scope (validation, inference).
class FlopPauseGuard {
public:
    explicit FlopPauseGuard(Engine& e) : e_(e), prev_(e.flops_paused_) { e_.flops_paused_ = true; }
    ~FlopPauseGuard() { e_.flops_paused_ = prev_; }
    FlopPauseGuard(const FlopPauseGuard&) = delete;
    FlopPauseGuard& operator=(const FlopPauseGuard&) = delete;

private:
    Engine& e_;
    bool prev_;
};

std::string shape_to_string(const std::vector<std::size_t>& s);

} // namespace matscale
