#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pemf/errors.hpp"
#include "pemf/tensor.hpp"

namespace pemf {

/// 2-D convolution geometry. Padding is zero-fill on both sides; dilation
/// spreads the kernel taps by the given rate.
struct ConvSpec {
    std::int64_t in_channels = 1;
    std::int64_t out_channels = 1;
    std::int64_t kh = 3, kw = 3;
    std::int64_t sh = 1, sw = 1;
    std::int64_t ph = 0, pw = 0;
    std::int64_t dilation = 1;

    std::int64_t out_h(std::int64_t h) const;
    std::int64_t out_w(std::int64_t w) const;
    void validate(const Shape& input, const Shape& weights, const Shape& bias) const;

    // 3x3 kernel with resolution-preserving padding (pad = dilation).
    static ConvSpec same3x3(std::int64_t cin, std::int64_t cout, std::int64_t dilation = 1);
    static ConvSpec k1x1(std::int64_t cin, std::int64_t cout);
};

enum class Mode { kTrain, kEval };

/// Per-channel running statistics carried across training steps.
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    std::int64_t batches_seen = 0;
    double momentum = 0.1;
    double epsilon = 1e-5;

    static BatchNormState make(std::int64_t channels);
};

/// Handle to a node on a Tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Tape;

/// Gradients of one backward pass, indexed by tape node. Nodes the root does
/// not depend on read back as zeros.
class GradientMap {
public:
    const Tensor& at(Var v) const;
    Tensor& slot(Var v, const Shape& shape);

private:
    friend class Tape;
    GradientMap(const Tape* tape, std::size_t n) : tape_(tape), grads_(n) {}
    const Tape* tape_;
    mutable std::vector<Tensor> grads_;
};

/// Reverse-mode autodiff record. Nodes are appended in evaluation order;
/// backward() walks them in exact reverse insertion order, accumulating
/// gradients additively across fan-out. A tape stays valid read-only after
/// backward and may be walked again.
class Tape {
public:
    Var leaf(Tensor value);
    const Tensor& value(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    Var conv2d(Var input, Var weights, Var bias, const ConvSpec& spec);
    Var batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, Mode mode);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var add(Var a, Var b);
    Var mul_elementwise(Var a, Var b);
    Var scale(Var x, double factor);
    Var concat_channels(const std::vector<Var>& parts);
    Var slice_channels(Var x, std::int64_t begin, std::int64_t end);
    Var max_pool_2x2(Var x);
    Var upsample_bilinear_2x(Var x);
    Var sum(Var x);

    // Composite losses, mean-reduced over all elements. Targets are constants.
    Var bce_with_logits(Var logits, const Tensor& targets);
    Var soft_dice_loss(Var logits, const Tensor& targets, double epsilon);
    Var tv_loss(Var logits);

    /// Root must be scalar (numel 1). Returns d(root)/d(node) for every node
    /// the root depends on.
    GradientMap backward(Var root) const;

private:
    using BackwardFn = std::function<void(const Tape&, std::int32_t, GradientMap&)>;

    struct Node {
        Tensor value;
        std::vector<std::int32_t> parents;
        BackwardFn backward;  // empty for leaves
        const char* op = "leaf";
    };

    Var push(Tensor value, std::vector<std::int32_t> parents, BackwardFn fn, const char* op);
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
};

/// Total variation of a probability map (sum of |forward differences| in x
/// and y over B x 1 x H x W, divided by B*H*W). Plain function, no autodiff.
double total_variation(const Tensor& probs);

}  // namespace pemf
