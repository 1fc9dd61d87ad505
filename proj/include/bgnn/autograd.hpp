#pragma once

// Minimal reverse-mode engine. A Tape records every op's output value and a
// closure that maps the output gradient onto the op's inputs. Ops are coarse
// (whole matrices), so the closure overhead is negligible next to the math.

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "bgnn/error.hpp"
#include "bgnn/graph.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn {

/// Trainable tensor and its accumulated gradient.
template <typename T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

    bool empty() const noexcept { return value.empty(); }
    void zero_grad() {
        if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
        grad.fill(T(0));
    }
};

/// Handle to a tape node.
struct Var {
    static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
    std::uint32_t id = kNone;
    bool valid() const noexcept { return id != kNone; }
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

    /// A non-recording tape evaluates ops but keeps no backward closures.
    explicit Tape(bool record = true) : record_(record) {}

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor<T> value);
    /// Leaf bound to a parameter; backward() adds the leaf gradient into p.grad.
    Var parameter(Parameter<T>& p);
    /// Appends an op output. `fn` runs during backward only if some input needs
    /// a gradient.
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn);

    const Tensor<T>& value(Var v) const;
    bool needs_grad(Var v) const;
    /// Gradient buffer of an input, zero-initialised on first use.
    Tensor<T>& grad(Var v);
    const Tensor<T>* grad_if_any(Var v) const;

    /// Seeds d(loss)/d(loss) = 1 for a single-element output and back-propagates.
    void backward(Var loss);
    void backward(Var out, const Tensor<T>& seed);

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn fn;
        Parameter<T>* param = nullptr;
        bool needs_grad = false;
        bool has_grad = false;
    };

    const Node& node(Var v) const;
    Node& node(Var v);

    bool record_;
    std::vector<Node> nodes_;
};

enum class Quantizer { identity, tanh, sign, hardtanh };
enum class BalanceMode { none, mean, median };
/// channel: statistic per column over each group of rows; feature: per row
/// across its columns.
enum class BalanceAxis { channel, feature };
enum class Similarity { rbf_l2, hamming };

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;
};

namespace ad {

template <typename T> Var add(Tape<T>& t, Var a, Var b);
template <typename T> Var scale(Tape<T>& t, Var a, T s);
template <typename T> Var sum(Tape<T>& t, Var a);
/// Sum of all elements of a weighted by w (a constant tensor of equal shape).
template <typename T> Var dot_const(Tape<T>& t, Var a, const Tensor<T>& w);

/// x (m x in) times w^T (w is out x in). With `packed`, the caller guarantees
/// both operands are exactly {-1,+1} and the product runs on XNOR/popcount.
template <typename T> Var linear(Tape<T>& t, Var x, Var w, bool packed = false);
template <typename T> Var slice_cols(Tape<T>& t, Var x, std::size_t begin, std::size_t end);
template <typename T> Var concat_cols(Tape<T>& t, std::span<const Var> parts);
template <typename T> Var add_bias(Tape<T>& t, Var y, Var b);
/// out[r] = edges[r] + nodes[r / k]
template <typename T> Var add_node_to_edges(Tape<T>& t, Var edges, Var nodes, std::size_t k);
/// Channel-wise rescale: y[r][c] * alpha[c] (or alpha[0] for a single factor).
template <typename T> Var rescale(Tape<T>& t, Var y, Var alpha);
/// Rank-1 rescale: y[r][c] * alpha[c] * beta[(r / w) % h] * gamma[r % w].
template <typename T> Var rescale_rank1(Tape<T>& t, Var y, Var alpha, Var beta, Var gamma);

template <typename T>
Var batch_norm(Tape<T>& t, Var x, Var scale, Var shift, BatchNormState<T>& state, bool training);

template <typename T> Var relu(Tape<T>& t, Var x);
template <typename T> Var prelu(Tape<T>& t, Var x, Var slope);
template <typename T> Var tanh(Tape<T>& t, Var x);
/// Forward sign (x >= 0 -> +1); backward passes the gradient where |x| <= 1.
template <typename T> Var sign_ste(Tape<T>& t, Var x);
/// clamp(x, -1, 1); its exact gradient is the STE of sign.
template <typename T> Var hardtanh(Tape<T>& t, Var x);
template <typename T> Var quantize(Tape<T>& t, Var x, Quantizer q);

/// Edge rows (node-major, topology slot order): x_j - x_i.
template <typename T> Var edge_diff(Tape<T>& t, Var x, const GraphTopology& topo);
/// Edge rows: -x_j * x_i, the {-1,+1} encoding of x_i xor x_j.
template <typename T> Var edge_xor(Tape<T>& t, Var x, const GraphTopology& topo);
/// Max over each node's k consecutive edge rows; ties go to the first slot.
template <typename T> Var max_neighbours(Tape<T>& t, Var edges, std::size_t k);
/// Mean of neighbour features; a node without neighbours gets zeros.
template <typename T> Var mean_neighbours(Tape<T>& t, Var x, const GraphTopology& topo);

template <typename T> Var global_max_pool(Tape<T>& t, Var x, std::size_t graph_size);
template <typename T> Var global_avg_pool(Tape<T>& t, Var x, std::size_t graph_size);
/// x * mask elementwise, mask already holding 0 or 1/(1-p).
template <typename T> Var dropout(Tape<T>& t, Var x, const Tensor<T>& mask);
/// Row-wise l2 normalisation; zero rows stay zero.
template <typename T> Var l2_normalize_rows(Tape<T>& t, Var x);
/// Subtracts the mean or lower median. Axis channel uses groups of
/// `group_rows` rows (0 = all rows).
template <typename T>
Var balance(Tape<T>& t, Var x, BalanceMode mode, BalanceAxis axis, std::size_t group_rows = 0);

/// -(X X^T - d I) over the rows of x.
template <typename T> Var hamming_score(Tape<T>& t, Var x);

/// Mean cross-entropy of logits against integer labels.
template <typename T> Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels);
/// Mean over samples of T^2 * KL(softmax(teacher/T) || softmax(student/T)).
template <typename T>
Var distill_kl(Tape<T>& t, Var student, const Tensor<T>& teacher_logits, T temperature);
/// Mean over nodes of KL(LS^s_i || LS^t_i) over the union neighbourhood. The
/// teacher side is a constant.
template <typename T>
Var lsp_loss(Tape<T>& t, Var student_x, const Tensor<T>& teacher_x,
             const GraphTopology& student_topo, const GraphTopology& teacher_topo,
             Similarity student_sim, Similarity teacher_sim);

}  // namespace ad

}  // namespace bgnn
