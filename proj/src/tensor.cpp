// SPDX-License-Identifier: Apache-2.0
#include "matscale/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace matscale {

namespace detail {

enum class Op : std::uint8_t {
    leaf,
    constant,
    matmul,
    transpose,
    reshape,
    ew_unary,
    ew_binary,
    scale,
    add_scalar,
    softmax,
    layernorm,
    reduce_sum,
    reduce_mean,
    sum_all,
    mean_all,
    gather_rows,
    slice_rows,
    concat_rows,
};

struct Node {
    Op op{Op::constant};
    EwOp ew{EwOp::add};
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    bool requires_grad{false};
    bool is_leaf{false};
    bool consumed{false};
    double c{0.0};                     // scale / add_scalar constant
    int axis{-1};                      // softmax / reductions
    double eps{0.0};                   // layernorm
    std::size_t start{0};              // slice_rows offset
    std::vector<double> saved;         // layernorm per-row (mean, inv_std)
    std::vector<std::int64_t> indices; // gather_rows
};

} // namespace detail

using detail::Node;
using detail::Op;

namespace {

std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void check_shape_nonempty(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
    }
}

// Rows/cols view of a tensor treated as a matrix: 1-D is a single row.
std::pair<std::size_t, std::size_t> as_matrix(const std::vector<std::size_t>& shape) {
    if (shape.size() == 1) return {1, shape[0]};
    if (shape.size() == 2) return {shape[0], shape[1]};
    throw DimensionError("expected a 1-D or 2-D tensor, got " + shape_to_string(shape));
}

struct BroadcastPlan {
    std::vector<std::size_t> shape;  // output
    std::vector<std::size_t> dim_a;  // per-output-dim extent of a (1 = broadcast)
    std::vector<std::size_t> dim_b;
    std::size_t n{0};
    bool same{false};
};

BroadcastPlan plan_broadcast(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    BroadcastPlan p;
    if (a == b) {
        p.shape = a;
        p.n = numel(a);
        p.same = true;
        return p;
    }
    const std::size_t nd = std::max(a.size(), b.size());
    p.shape.resize(nd);
    p.dim_a.resize(nd);
    p.dim_b.resize(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + shape_to_string(a) + " and " + shape_to_string(b) +
                                 " are not broadcast-compatible");
        }
        p.shape[i] = std::max(da, db);
        p.dim_a[i] = da;
        p.dim_b[i] = db;
    }
    p.n = numel(p.shape);
    return p;
}

// Maps a flat output index to flat indices into both operands.
void broadcast_indices(const BroadcastPlan& p, std::size_t flat, std::size_t& ia, std::size_t& ib) {
    ia = 0;
    ib = 0;
    std::size_t rem = flat;
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = p.shape.size(); i-- > 0;) {
        const std::size_t coord = rem % p.shape[i];
        rem /= p.shape[i];
        if (p.dim_a[i] != 1) ia += coord * sa;
        if (p.dim_b[i] != 1) ib += coord * sb;
        sa *= p.dim_a[i];
        sb *= p.dim_b[i];
    }
}

double fwd_unary(EwOp op, double x) {
    switch (op) {
        case EwOp::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case EwOp::silu: return x / (1.0 + std::exp(-x));
        case EwOp::sin: return std::sin(x);
        case EwOp::cos: return std::cos(x);
        case EwOp::square: return x * x;
        case EwOp::sqrt: return std::sqrt(x);
        case EwOp::exp: return std::exp(x);
        case EwOp::abs: return std::fabs(x);
        case EwOp::neg: return -x;
        default: throw ContractError("not a unary elementwise op");
    }
}

double fwd_binary(EwOp op, double x, double y) {
    switch (op) {
        case EwOp::add: return x + y;
        case EwOp::sub: return x - y;
        case EwOp::mul: return x * y;
        default: throw ContractError("not a binary elementwise op");
    }
}

bool is_binary(EwOp op) { return op == EwOp::add || op == EwOp::sub || op == EwOp::mul; }

// FLOPs per element: forward primitives, then backward by the same rules
// applied to the derivative expressions.
std::uint64_t ew_fwd_flops(EwOp op) {
    switch (op) {
        case EwOp::silu: return 2;
        default: return 1;
    }
}

std::uint64_t ew_bwd_flops(EwOp op) {
    switch (op) {
        case EwOp::add:
        case EwOp::sub: return 2; // one accumulate per operand
        case EwOp::mul: return 4;
        case EwOp::sigmoid: return 2;
        case EwOp::silu: return 4;
        case EwOp::sin:
        case EwOp::cos: return 2;
        case EwOp::square: return 2;
        case EwOp::sqrt: return 2;
        case EwOp::exp: return 2;
        case EwOp::abs: return 2;
        case EwOp::neg: return 1;
        default: return 1;
    }
}

void ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

// Softmax/layernorm iterate over "lines": contiguous-strided slices along
// the chosen axis of a 1-D or 2-D tensor.
struct LineView {
    std::size_t n_lines;
    std::size_t length;
    std::size_t stride;      // between elements within a line
    std::size_t line_stride; // between line starts
};

LineView lines_along(const std::vector<std::size_t>& shape, int axis) {
    if (shape.size() == 1) {
        if (axis != 0) throw ContractError("axis " + std::to_string(axis) + " invalid for shape " + shape_to_string(shape));
        return {1, shape[0], 1, 0};
    }
    if (shape.size() == 2) {
        if (axis == 0) return {shape[1], shape[0], shape[1], 1};
        if (axis == 1) return {shape[0], shape[1], 1, shape[1]};
        throw ContractError("axis " + std::to_string(axis) + " invalid for shape " + shape_to_string(shape));
    }
    throw DimensionError("expected a 1-D or 2-D tensor, got " + shape_to_string(shape));
}

} // namespace

std::string shape_to_string(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Tensor accessors
// ---------------------------------------------------------------------------

static const Node& deref(const std::shared_ptr<Node>& n) {
    if (!n) throw StateError("operation on an empty tensor handle");
    return *n;
}

const std::vector<std::size_t>& Tensor::shape() const { return deref(node_).shape; }
std::size_t Tensor::size() const { return deref(node_).value.size(); }

std::size_t Tensor::rows() const { return as_matrix(deref(node_).shape).first; }
std::size_t Tensor::cols() const { return as_matrix(deref(node_).shape).second; }

const std::vector<double>& Tensor::values() const { return deref(node_).value; }

std::vector<double>& Tensor::mutable_values() {
    if (!node_) throw StateError("operation on an empty tensor handle");
    if (!node_->is_leaf && node_->op != Op::constant) {
        throw StateError("only leaf or constant tensors may be mutated in place");
    }
    return node_->value;
}

double Tensor::item() const {
    const Node& n = deref(node_);
    if (n.value.size() != 1) throw ContractError("item() requires a scalar, got shape " + shape_to_string(n.shape));
    return n.value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    const Node& n = deref(node_);
    auto [rows, cols] = as_matrix(n.shape);
    if (r >= rows || c >= cols) throw ContractError("index out of range");
    return n.value[r * cols + c];
}

bool Tensor::requires_grad() const { return deref(node_).requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    const Node& n = deref(node_);
    if (n.grad.empty()) throw StateError("tensor has no gradient; run backward first");
    return n.grad;
}

void Tensor::zero_grad() {
    if (node_) {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Engine: construction and bookkeeping
// ---------------------------------------------------------------------------

double Engine::q(double v) const {
    return mode_ == Precision::reduced32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void Engine::quantize(std::vector<double>& v) const {
    if (mode_ != Precision::reduced32) return;
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void Engine::count(FlopClass c, std::uint64_t n) {
    if (!flops_paused_) class_counts_[static_cast<unsigned>(c)] += n;
}

FlopCounter Engine::flops() const {
    static const char* names[] = {"matmul", "elementwise", "softmax", "layernorm", "reduction"};
    FlopCounter fc;
    for (unsigned i = 0; i < static_cast<unsigned>(FlopClass::n_classes); ++i) {
        if (class_counts_[i] > 0) fc.per_class[names[i]] = class_counts_[i];
        fc.total += class_counts_[i];
    }
    return fc;
}

std::uint64_t Engine::flop_total() const {
    std::uint64_t t = 0;
    for (std::uint64_t c : class_counts_) t += c;
    return t;
}

void Engine::reset_flops() {
    for (auto& c : class_counts_) c = 0;
}

Tensor Engine::make(Node&& n) {
    quantize(n.value);
    return Tensor(std::make_shared<Node>(std::move(n)));
}

Tensor Engine::constant(std::vector<std::size_t> shape, std::vector<double> data) {
    check_shape_nonempty(shape);
    if (numel(shape) != data.size()) {
        throw DimensionError("shape " + shape_to_string(shape) + " needs " + std::to_string(numel(shape)) +
                             " values, got " + std::to_string(data.size()));
    }
    Node n;
    n.op = Op::constant;
    n.shape = std::move(shape);
    n.value = std::move(data);
    return make(std::move(n));
}

Tensor Engine::leaf(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->op = Op::leaf;
    t.node_->is_leaf = true;
    t.node_->requires_grad = true;
    return t;
}

Tensor Engine::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    check_shape_nonempty(shape);
    std::vector<double> data(numel(shape), 0.0);
    return requires_grad ? leaf(std::move(shape), std::move(data)) : constant(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Engine: forward ops
// ---------------------------------------------------------------------------

namespace {
Node node_of(Op op, std::vector<std::size_t> shape) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    return n;
}
} // namespace

static void link(Node& n, const std::shared_ptr<Node>& sp) {
    n.parents.push_back(sp);
    n.requires_grad = n.requires_grad || sp->requires_grad;
}

Tensor Engine::matmul(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw DimensionError("matmul shapes " + shape_to_string(sa) + " x " + shape_to_string(sb) + " do not agree");
    }
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Node out = node_of(Op::matmul, {m, n});
    out.value.assign(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + p * n;
            double* orow = out.value.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    link(out, a.node_);
    link(out, b.node_);
    count(FlopClass::matmul, static_cast<std::uint64_t>(2) * m * n * k);
    return make(std::move(out));
}

Tensor Engine::transpose(const Tensor& a) {
    const auto& s = a.shape();
    if (s.size() != 2) throw DimensionError("transpose expects a 2-D tensor, got " + shape_to_string(s));
    const std::size_t m = s[0], n = s[1];
    Node out = node_of(Op::transpose, {n, m});
    out.value.resize(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.value[j * m + i] = av[i * n + j];
    link(out, a.node_);
    return make(std::move(out));
}

Tensor Engine::reshape(const Tensor& a, std::vector<std::size_t> shape) {
    check_shape_nonempty(shape);
    if (numel(shape) != a.size()) {
        throw DimensionError("cannot reshape " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
    }
    Node out = node_of(Op::reshape, std::move(shape));
    out.value = a.values();
    link(out, a.node_);
    return make(std::move(out));
}

Tensor Engine::elementwise(EwOp op, const Tensor& a) {
    if (is_binary(op)) throw ContractError("binary elementwise op requires two operands");
    Node out = node_of(Op::ew_unary, a.shape());
    out.ew = op;
    const auto& av = a.values();
    out.value.resize(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = fwd_unary(op, av[i]);
    link(out, a.node_);
    count(FlopClass::elementwise, av.size() * ew_fwd_flops(op));
    return make(std::move(out));
}

Tensor Engine::elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    if (!is_binary(op)) throw ContractError("unary elementwise op takes one operand");
    const BroadcastPlan p = plan_broadcast(a.shape(), b.shape());
    Node out = node_of(Op::ew_binary, p.shape);
    out.ew = op;
    out.value.resize(p.n);
    const auto& av = a.values();
    const auto& bv = b.values();
    if (p.same) {
        for (std::size_t i = 0; i < p.n; ++i) out.value[i] = fwd_binary(op, av[i], bv[i]);
    } else {
        for (std::size_t i = 0; i < p.n; ++i) {
            std::size_t ia, ib;
            broadcast_indices(p, i, ia, ib);
            out.value[i] = fwd_binary(op, av[ia], bv[ib]);
        }
    }
    link(out, a.node_);
    link(out, b.node_);
    count(FlopClass::elementwise, p.n * ew_fwd_flops(op));
    return make(std::move(out));
}

Tensor Engine::scale(const Tensor& a, double c) {
    Node out = node_of(Op::scale, a.shape());
    out.c = c;
    const auto& av = a.values();
    out.value.resize(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = c * av[i];
    link(out, a.node_);
    count(FlopClass::elementwise, av.size());
    return make(std::move(out));
}

Tensor Engine::add_scalar(const Tensor& a, double c) {
    Node out = node_of(Op::add_scalar, a.shape());
    out.c = c;
    const auto& av = a.values();
    out.value.resize(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = av[i] + c;
    link(out, a.node_);
    count(FlopClass::elementwise, av.size());
    return make(std::move(out));
}

Tensor Engine::softmax(const Tensor& a, int axis) {
    const LineView lv = lines_along(a.shape(), axis);
    Node out = node_of(Op::softmax, a.shape());
    out.axis = axis;
    const auto& av = a.values();
    out.value.resize(av.size());
    for (std::size_t l = 0; l < lv.n_lines; ++l) {
        const std::size_t base = l * lv.line_stride;
        double mx = av[base];
        for (std::size_t i = 1; i < lv.length; ++i) mx = std::max(mx, av[base + i * lv.stride]);
        double sum = 0.0;
        for (std::size_t i = 0; i < lv.length; ++i) {
            const double e = std::exp(av[base + i * lv.stride] - mx);
            out.value[base + i * lv.stride] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < lv.length; ++i) out.value[base + i * lv.stride] *= inv;
    }
    link(out, a.node_);
    count(FlopClass::softmax, av.size() * 4);
    return make(std::move(out));
}

Tensor Engine::layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ContractError("layernorm eps must be positive");
    const auto [rows, cols] = as_matrix(a.shape());
    if (gain.shape() != std::vector<std::size_t>{cols} || bias.shape() != std::vector<std::size_t>{cols}) {
        throw DimensionError("layernorm gain/bias must be 1-D of length " + std::to_string(cols));
    }
    Node out = node_of(Op::layernorm, a.shape());
    out.eps = eps;
    const auto& av = a.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    out.value.resize(av.size());
    out.saved.resize(rows * 2);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += x[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        out.saved[2 * r] = mean;
        out.saved[2 * r + 1] = inv;
        double* y = out.value.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) y[j] = (x[j] - mean) * inv * gv[j] + bv[j];
    }
    link(out, a.node_);
    link(out, gain.node_);
    link(out, bias.node_);
    count(FlopClass::layernorm, av.size() * 8);
    return make(std::move(out));
}

Tensor Engine::reduce_sum(const Tensor& a, int axis) {
    const LineView lv = lines_along(a.shape(), axis);
    std::vector<std::size_t> oshape = a.shape();
    if (oshape.size() == 1) {
        oshape[0] = 1;
    } else {
        oshape[static_cast<std::size_t>(axis)] = 1;
    }
    Node out = node_of(Op::reduce_sum, std::move(oshape));
    out.axis = axis;
    const auto& av = a.values();
    out.value.assign(lv.n_lines, 0.0);
    for (std::size_t l = 0; l < lv.n_lines; ++l) {
        const std::size_t base = l * lv.line_stride;
        double s = 0.0;
        for (std::size_t i = 0; i < lv.length; ++i) s += av[base + i * lv.stride];
        out.value[l] = s;
    }
    link(out, a.node_);
    count(FlopClass::reduction, av.size());
    return make(std::move(out));
}

Tensor Engine::reduce_mean(const Tensor& a, int axis) {
    const LineView lv = lines_along(a.shape(), axis);
    Tensor s = reduce_sum(a, axis);
    return scale(s, 1.0 / static_cast<double>(lv.length));
}

Tensor Engine::sum_all(const Tensor& a) {
    Node out = node_of(Op::sum_all, {1});
    const auto& av = a.values();
    double s = 0.0;
    for (double v : av) s += v;
    out.value.assign(1, s);
    link(out, a.node_);
    count(FlopClass::reduction, av.size());
    return make(std::move(out));
}

Tensor Engine::mean_all(const Tensor& a) {
    Tensor s = sum_all(a);
    return scale(s, 1.0 / static_cast<double>(a.size()));
}

Tensor Engine::gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices) {
    const auto& s = table.shape();
    if (s.size() != 2) throw DimensionError("gather_rows expects a 2-D table, got " + shape_to_string(s));
    if (indices.empty()) throw ContractError("gather_rows requires at least one index");
    const std::size_t rows = s[0], cols = s[1];
    for (std::int64_t idx : indices) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
            throw DomainError("gather_rows index " + std::to_string(idx) + " out of range [0," + std::to_string(rows) + ")");
        }
    }
    Node out = node_of(Op::gather_rows, {indices.size(), cols});
    out.indices = indices;
    out.value.resize(indices.size() * cols);
    const auto& tv = table.values();
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::memcpy(out.value.data() + r * cols, tv.data() + static_cast<std::size_t>(indices[r]) * cols,
                    cols * sizeof(double));
    }
    link(out, table.node_);
    return make(std::move(out));
}

Tensor Engine::slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    const auto& s = a.shape();
    if (s.size() != 2) throw DimensionError("slice_rows expects a 2-D tensor, got " + shape_to_string(s));
    if (count == 0 || start + count > s[0]) {
        throw ContractError("slice_rows range [" + std::to_string(start) + "," + std::to_string(start + count) +
                            ") invalid for " + std::to_string(s[0]) + " rows");
    }
    const std::size_t cols = s[1];
    Node out = node_of(Op::slice_rows, {count, cols});
    out.start = start;
    out.value.assign(a.values().begin() + static_cast<std::ptrdiff_t>(start * cols),
                     a.values().begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
    link(out, a.node_);
    return make(std::move(out));
}

Tensor Engine::concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows requires at least one part");
    const std::size_t cols = as_matrix(parts[0].shape()).second;
    std::size_t rows = 0;
    for (const Tensor& t : parts) {
        auto [r, c] = as_matrix(t.shape());
        if (c != cols) throw DimensionError("concat_rows requires equal column counts");
        rows += r;
    }
    Node out;
    out.op = Op::concat_rows;
    out.shape = {rows, cols};
    out.value.reserve(rows * cols);
    for (const Tensor& t : parts) {
        out.value.insert(out.value.end(), t.values().begin(), t.values().end());
        link(out, t.node_);
    }
    return make(std::move(out));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {
// Accumulates a broadcast output gradient back into a parent of the original
// operand shape.
void reduce_into(const BroadcastPlan& p, bool first_operand, const std::vector<double>& gout,
                 std::vector<double>& gparent, double sign, Precision mode) {
    const bool reduced = mode == Precision::reduced32;
    if (p.same) {
        for (std::size_t i = 0; i < gout.size(); ++i) {
            double v = gparent[i] + sign * gout[i];
            gparent[i] = reduced ? static_cast<double>(static_cast<float>(v)) : v;
        }
        return;
    }
    for (std::size_t i = 0; i < p.n; ++i) {
        std::size_t ia, ib;
        broadcast_indices(p, i, ia, ib);
        const std::size_t ip = first_operand ? ia : ib;
        double v = gparent[ip] + sign * gout[i];
        gparent[ip] = reduced ? static_cast<double>(static_cast<float>(v)) : v;
    }
}
} // namespace

void Engine::backward_dispatch(Node& n) {
    const std::vector<double>& g = n.grad;
    auto acc = [this](std::vector<double>& dst, std::size_t i, double v) {
        dst[i] = q(dst[i] + v);
    };

    switch (n.op) {
        case Op::leaf:
        case Op::constant:
            break;

        case Op::matmul: {
            Node& A = *n.parents[0];
            Node& B = *n.parents[1];
            const std::size_t m = A.shape[0], k = A.shape[1], cols = B.shape[1];
            if (A.requires_grad) {
                ensure_grad(A);
                // dA[i,p] += sum_j g[i,j] * B[p,j]
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* grow = g.data() + i * cols;
                        const double* brow = B.value.data() + p * cols;
                        for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
                        acc(A.grad, i * k + p, s);
                    }
                }
                count(FlopClass::matmul, static_cast<std::uint64_t>(2) * m * k * cols);
            }
            if (B.requires_grad) {
                ensure_grad(B);
                // dB[p,j] += sum_i A[i,p] * g[i,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * cols;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = A.value[i * k + p];
                        if (aip == 0.0) continue;
                        for (std::size_t j = 0; j < cols; ++j) {
                            B.grad[p * cols + j] = q(B.grad[p * cols + j] + aip * grow[j]);
                        }
                    }
                }
                count(FlopClass::matmul, static_cast<std::uint64_t>(2) * m * k * cols);
            }
            break;
        }

        case Op::transpose: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            const std::size_t m = A.shape[0], cols = A.shape[1];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < cols; ++j) acc(A.grad, i * cols + j, g[j * m + i]);
            break;
        }

        case Op::reshape: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            for (std::size_t i = 0; i < g.size(); ++i) acc(A.grad, i, g[i]);
            break;
        }

        case Op::ew_unary: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            const auto& x = A.value;
            const auto& y = n.value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                double d;
                switch (n.ew) {
                    case EwOp::sigmoid: d = y[i] * (1.0 - y[i]); break;
                    case EwOp::silu: {
                        const double s = 1.0 / (1.0 + std::exp(-x[i]));
                        d = s * (1.0 + x[i] * (1.0 - s));
                        break;
                    }
                    case EwOp::sin: d = std::cos(x[i]); break;
                    case EwOp::cos: d = -std::sin(x[i]); break;
                    case EwOp::square: d = 2.0 * x[i]; break;
                    case EwOp::sqrt: d = y[i] > 0.0 ? 0.5 / y[i] : 0.0; break;
                    case EwOp::exp: d = y[i]; break;
                    case EwOp::abs: d = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0); break;
                    case EwOp::neg: d = -1.0; break;
                    default: throw StateError("bad unary op in backward");
                }
                acc(A.grad, i, g[i] * d);
            }
            count(FlopClass::elementwise, g.size() * ew_bwd_flops(n.ew));
            break;
        }

        case Op::ew_binary: {
            Node& A = *n.parents[0];
            Node& B = *n.parents[1];
            const BroadcastPlan p = plan_broadcast(A.shape, B.shape);
            if (n.ew == EwOp::add || n.ew == EwOp::sub) {
                const double sign_b = n.ew == EwOp::sub ? -1.0 : 1.0;
                if (A.requires_grad) {
                    ensure_grad(A);
                    reduce_into(p, true, g, A.grad, 1.0, mode_);
                }
                if (B.requires_grad) {
                    ensure_grad(B);
                    reduce_into(p, false, g, B.grad, sign_b, mode_);
                }
            } else { // mul
                if (A.requires_grad) ensure_grad(A);
                if (B.requires_grad) ensure_grad(B);
                if (p.same) {
                    for (std::size_t i = 0; i < p.n; ++i) {
                        if (A.requires_grad) acc(A.grad, i, g[i] * B.value[i]);
                        if (B.requires_grad) acc(B.grad, i, g[i] * A.value[i]);
                    }
                } else {
                    for (std::size_t i = 0; i < p.n; ++i) {
                        std::size_t ia, ib;
                        broadcast_indices(p, i, ia, ib);
                        if (A.requires_grad) acc(A.grad, ia, g[i] * B.value[ib]);
                        if (B.requires_grad) acc(B.grad, ib, g[i] * A.value[ia]);
                    }
                }
            }
            count(FlopClass::elementwise, p.n * ew_bwd_flops(n.ew));
            break;
        }

        case Op::scale: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            for (std::size_t i = 0; i < g.size(); ++i) acc(A.grad, i, g[i] * n.c);
            count(FlopClass::elementwise, g.size());
            break;
        }

        case Op::add_scalar: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            for (std::size_t i = 0; i < g.size(); ++i) acc(A.grad, i, g[i]);
            count(FlopClass::elementwise, g.size());
            break;
        }

        case Op::softmax: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            const LineView lv = lines_along(n.shape, n.axis);
            for (std::size_t l = 0; l < lv.n_lines; ++l) {
                const std::size_t base = l * lv.line_stride;
                double dot = 0.0;
                for (std::size_t i = 0; i < lv.length; ++i) {
                    const std::size_t k = base + i * lv.stride;
                    dot += g[k] * n.value[k];
                }
                for (std::size_t i = 0; i < lv.length; ++i) {
                    const std::size_t k = base + i * lv.stride;
                    acc(A.grad, k, (g[k] - dot) * n.value[k]);
                }
            }
            count(FlopClass::softmax, g.size() * 4);
            break;
        }

        case Op::layernorm: {
            Node& A = *n.parents[0];
            Node& G = *n.parents[1];
            Node& B = *n.parents[2];
            const auto [rows, cols] = as_matrix(n.shape);
            const double inv_cols = 1.0 / static_cast<double>(cols);
            if (A.requires_grad) ensure_grad(A);
            if (G.requires_grad) ensure_grad(G);
            if (B.requires_grad) ensure_grad(B);
            for (std::size_t r = 0; r < rows; ++r) {
                const double mean = n.saved[2 * r];
                const double inv = n.saved[2 * r + 1];
                const double* x = A.value.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double xh = (x[j] - mean) * inv;
                    const double dxh = gr[j] * G.value[j];
                    m1 += dxh;
                    m2 += dxh * xh;
                    if (G.requires_grad) acc(G.grad, j, gr[j] * xh);
                    if (B.requires_grad) acc(B.grad, j, gr[j]);
                }
                if (A.requires_grad) {
                    m1 *= inv_cols;
                    m2 *= inv_cols;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double xh = (x[j] - mean) * inv;
                        const double dxh = gr[j] * G.value[j];
                        acc(A.grad, r * cols + j, inv * (dxh - m1 - xh * m2));
                    }
                }
            }
            count(FlopClass::layernorm, g.size() * 8);
            break;
        }

        case Op::reduce_sum: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            const LineView lv = lines_along(A.shape, n.axis);
            for (std::size_t l = 0; l < lv.n_lines; ++l) {
                const std::size_t base = l * lv.line_stride;
                for (std::size_t i = 0; i < lv.length; ++i) acc(A.grad, base + i * lv.stride, g[l]);
            }
            count(FlopClass::reduction, A.value.size());
            break;
        }

        case Op::sum_all: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            for (std::size_t i = 0; i < A.value.size(); ++i) acc(A.grad, i, g[0]);
            count(FlopClass::reduction, A.value.size());
            break;
        }

        case Op::gather_rows: {
            Node& T = *n.parents[0];
            if (!T.requires_grad) break;
            ensure_grad(T);
            const std::size_t cols = T.shape[1];
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                const std::size_t dst = static_cast<std::size_t>(n.indices[r]) * cols;
                for (std::size_t j = 0; j < cols; ++j) acc(T.grad, dst + j, g[r * cols + j]);
            }
            break;
        }

        case Op::slice_rows: {
            Node& A = *n.parents[0];
            if (!A.requires_grad) break;
            ensure_grad(A);
            const std::size_t cols = A.shape[1];
            for (std::size_t i = 0; i < g.size(); ++i) acc(A.grad, n.start * cols + i, g[i]);
            break;
        }

        case Op::concat_rows: {
            std::size_t offset = 0;
            for (auto& psp : n.parents) {
                Node& P = *psp;
                const std::size_t len = P.value.size();
                if (P.requires_grad) {
                    ensure_grad(P);
                    for (std::size_t i = 0; i < len; ++i) acc(P.grad, i, g[offset + i]);
                }
                offset += len;
            }
            break;
        }

        case Op::reduce_mean:
        case Op::mean_all:
            // Composed from reduce_sum/sum_all + scale; never appears as a node.
            throw StateError("unexpected composite op in backward");
    }
}

void Engine::backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward on an empty tensor handle");
    std::shared_ptr<Node> root = loss.node_;
    if (root->value.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(root->shape));
    }
    if (root->consumed) throw StateError("backward already ran on this graph");
    if (!root->requires_grad) {
        root->consumed = true;
        return;
    }

    // Post-order over the requires-grad subgraph, iteratively.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->consumed) throw StateError("graph was already consumed by a previous backward");
        bool descended = false;
        while (next < node->parents.size()) {
            Node* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
            order.push_back(stack.back().first);
            stack.pop_back();
        }
    }

    root->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        backward_dispatch(**it);
        if (!(*it)->is_leaf) {
            (*it)->grad.clear();
            (*it)->grad.shrink_to_fit();
        }
    }

    // Single-use graphs: unlink interior edges so memory is released as the
    // last handles drop.
    for (Node* nd : order) {
        if (!nd->is_leaf) {
            nd->consumed = true;
            nd->parents.clear();
        }
    }
    root->consumed = true;
}

} // namespace matscale
