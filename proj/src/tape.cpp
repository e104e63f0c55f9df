#include "pemf/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

namespace pemf {

namespace {

constexpr std::int64_t kParallelMacs = 1 << 17;

std::int64_t div_floor(std::int64_t a, std::int64_t b) {
    // b > 0
    return a >= 0 ? a / b : -((-a + b - 1) / b);
}

std::int64_t div_ceil(std::int64_t a, std::int64_t b) {
    // b > 0
    return a > 0 ? (a + b - 1) / b : -(-a / b);
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) {
        throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Valid output index range [lo, hi) such that o*stride - pad + tap*dilation
// lands inside [0, extent).
std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t out_extent, std::int64_t in_extent,
                                                std::int64_t stride, std::int64_t pad,
                                                std::int64_t tap, std::int64_t dilation) {
    const std::int64_t off = tap * dilation - pad;
    std::int64_t lo = std::max<std::int64_t>(0, div_ceil(-off, stride));
    std::int64_t hi = std::min(out_extent, div_floor(in_extent - 1 - off, stride) + 1);
    if (hi < lo) hi = lo;
    return {lo, hi};
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, std::int64_t pad, std::int64_t k,
                             std::int64_t stride, std::int64_t dilation) {
    return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

std::int64_t ConvSpec::out_h(std::int64_t h) const {
    return conv_out_extent(h, ph, kh, sh, dilation);
}

std::int64_t ConvSpec::out_w(std::int64_t w) const {
    return conv_out_extent(w, pw, kw, sw, dilation);
}

void ConvSpec::validate(const Shape& input, const Shape& weights, const Shape& bias) const {
    require(in_channels > 0 && out_channels > 0 && kh > 0 && kw > 0 && sh > 0 && sw > 0 &&
                ph >= 0 && pw >= 0 && dilation > 0,
            "conv2d: invalid spec");
    require(input.size() == 4, "conv2d: input must be B x C x H x W, got " + shape_str(input));
    require(weights.size() == 4 && weights[0] == out_channels && weights[1] == in_channels &&
                weights[2] == kh && weights[3] == kw,
            "conv2d: weights must be " + shape_str({out_channels, in_channels, kh, kw}) +
                ", got " + shape_str(weights));
    require(bias.size() == 1 && bias[0] == out_channels,
            "conv2d: bias must have length " + std::to_string(out_channels) + ", got " +
                shape_str(bias));
    require(input[1] == in_channels,
            "conv2d: input has " + std::to_string(input[1]) + " channels, spec expects " +
                std::to_string(in_channels));
    require(out_h(input[2]) >= 1 && out_w(input[3]) >= 1,
            "conv2d: output extent < 1 for input " + shape_str(input));
}

ConvSpec ConvSpec::same3x3(std::int64_t cin, std::int64_t cout, std::int64_t dilation) {
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kh = s.kw = 3;
    s.ph = s.pw = dilation;
    s.dilation = dilation;
    return s;
}

ConvSpec ConvSpec::k1x1(std::int64_t cin, std::int64_t cout) {
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kh = s.kw = 1;
    s.ph = s.pw = 0;
    s.dilation = 1;
    return s;
}

BatchNormState BatchNormState::make(std::int64_t channels) {
    BatchNormState s;
    s.running_mean = Tensor({channels});
    s.running_var = Tensor({channels});
    return s;
}

const Tensor& GradientMap::at(Var v) const {
    const std::size_t i = static_cast<std::size_t>(v.id);
    if (grads_[i].numel() == 0) {
        grads_[i] = Tensor(tape_->value(v).shape());
    }
    return grads_[i];
}

Tensor& GradientMap::slot(Var v, const Shape& shape) {
    const std::size_t i = static_cast<std::size_t>(v.id);
    if (grads_[i].numel() == 0) {
        grads_[i] = Tensor(shape);
    }
    return grads_[i];
}

Var Tape::push(Tensor value, std::vector<std::int32_t> parents, BackwardFn fn, const char* op) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw ShapeError("invalid tape node handle");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::leaf(Tensor value) {
    check_finite(value, "leaf");
    return push(std::move(value), {}, nullptr, "leaf");
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

GradientMap Tape::backward(Var root) const {
    const Node& r = node(root);
    if (r.value.numel() != 1) {
        throw ShapeError("backward: root must be scalar, got " + shape_str(r.value.shape()));
    }
    GradientMap grads(this, nodes_.size());
    grads.slot(root, r.value.shape())[0] = 1.0;
    for (std::int32_t id = root.id; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (grads.grads_[static_cast<std::size_t>(id)].numel() == 0) continue;  // unreached
        if (!n.backward) {
            if (!n.parents.empty()) {
                throw NumericError(std::string("backward rule missing for op ") + n.op);
            }
            continue;  // leaf
        }
        n.backward(*this, id, grads);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& s,
                    Tensor& out) {
    const std::int64_t B = x.shape()[0], Cin = s.in_channels, H = x.shape()[2], W = x.shape()[3];
    const std::int64_t Cout = s.out_channels, OH = out.shape()[2], OW = out.shape()[3];
    const double* xp = x.data();
    const double* wp = w.data();
    const double* bp = b.data();
    double* op = out.data();
    const std::int64_t macs = B * Cout * Cin * s.kh * s.kw * OH * OW;

#pragma omp parallel for collapse(2) schedule(static) if (macs > kParallelMacs)
    for (std::int64_t bi = 0; bi < B; ++bi) {
        for (std::int64_t co = 0; co < Cout; ++co) {
            double* out_plane = op + (bi * Cout + co) * OH * OW;
            const double bias = bp[co];
            for (std::int64_t i = 0; i < OH * OW; ++i) out_plane[i] = bias;
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
                const double* in_plane = xp + (bi * Cin + ci) * H * W;
                const double* w_plane = wp + (co * Cin + ci) * s.kh * s.kw;
                for (std::int64_t th = 0; th < s.kh; ++th) {
                    const auto [oh_lo, oh_hi] = tap_range(OH, H, s.sh, s.ph, th, s.dilation);
                    for (std::int64_t tw = 0; tw < s.kw; ++tw) {
                        const double wv = w_plane[th * s.kw + tw];
                        const auto [ow_lo, ow_hi] = tap_range(OW, W, s.sw, s.pw, tw, s.dilation);
                        const std::int64_t woff = tw * s.dilation - s.pw;
                        for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::int64_t ih = oh * s.sh - s.ph + th * s.dilation;
                            const double* in_row = in_plane + ih * W + woff;
                            double* out_row = out_plane + oh * OW;
                            for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) {
                                out_row[ow] += wv * in_row[ow * s.sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(const Tensor& gy, const Tensor& w, const ConvSpec& s, Tensor& gx) {
    const std::int64_t B = gx.shape()[0], Cin = s.in_channels, H = gx.shape()[2],
                       W = gx.shape()[3];
    const std::int64_t Cout = s.out_channels, OH = gy.shape()[2], OW = gy.shape()[3];
    const double* gyp = gy.data();
    const double* wp = w.data();
    double* gxp = gx.data();
    const std::int64_t macs = B * Cout * Cin * s.kh * s.kw * OH * OW;

#pragma omp parallel for collapse(2) schedule(static) if (macs > kParallelMacs)
    for (std::int64_t bi = 0; bi < B; ++bi) {
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
            double* gx_plane = gxp + (bi * Cin + ci) * H * W;
            for (std::int64_t co = 0; co < Cout; ++co) {
                const double* gy_plane = gyp + (bi * Cout + co) * OH * OW;
                const double* w_plane = wp + (co * Cin + ci) * s.kh * s.kw;
                for (std::int64_t th = 0; th < s.kh; ++th) {
                    const auto [oh_lo, oh_hi] = tap_range(OH, H, s.sh, s.ph, th, s.dilation);
                    for (std::int64_t tw = 0; tw < s.kw; ++tw) {
                        const double wv = w_plane[th * s.kw + tw];
                        const auto [ow_lo, ow_hi] = tap_range(OW, W, s.sw, s.pw, tw, s.dilation);
                        const std::int64_t woff = tw * s.dilation - s.pw;
                        for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::int64_t ih = oh * s.sh - s.ph + th * s.dilation;
                            double* gx_row = gx_plane + ih * W + woff;
                            const double* gy_row = gy_plane + oh * OW;
                            for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) {
                                gx_row[ow * s.sw] += wv * gy_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_weights(const Tensor& gy, const Tensor& x, const ConvSpec& s, Tensor& gw) {
    const std::int64_t B = x.shape()[0], Cin = s.in_channels, H = x.shape()[2], W = x.shape()[3];
    const std::int64_t Cout = s.out_channels, OH = gy.shape()[2], OW = gy.shape()[3];
    const double* gyp = gy.data();
    const double* xp = x.data();
    double* gwp = gw.data();
    const std::int64_t macs = B * Cout * Cin * s.kh * s.kw * OH * OW;

#pragma omp parallel for collapse(2) schedule(static) if (macs > kParallelMacs)
    for (std::int64_t co = 0; co < Cout; ++co) {
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
            double* gw_plane = gwp + (co * Cin + ci) * s.kh * s.kw;
            for (std::int64_t th = 0; th < s.kh; ++th) {
                const auto [oh_lo, oh_hi] = tap_range(OH, H, s.sh, s.ph, th, s.dilation);
                for (std::int64_t tw = 0; tw < s.kw; ++tw) {
                    const auto [ow_lo, ow_hi] = tap_range(OW, W, s.sw, s.pw, tw, s.dilation);
                    const std::int64_t woff = tw * s.dilation - s.pw;
                    double acc = 0.0;
                    for (std::int64_t bi = 0; bi < B; ++bi) {
                        const double* gy_plane = gyp + (bi * Cout + co) * OH * OW;
                        const double* x_plane = xp + (bi * Cin + ci) * H * W;
                        for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::int64_t ih = oh * s.sh - s.ph + th * s.dilation;
                            const double* x_row = x_plane + ih * W + woff;
                            const double* gy_row = gy_plane + oh * OW;
                            for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) {
                                acc += gy_row[ow] * x_row[ow * s.sw];
                            }
                        }
                    }
                    gw_plane[th * s.kw + tw] += acc;
                }
            }
        }
    }
}

}  // namespace

Var Tape::conv2d(Var input, Var weights, Var bias, const ConvSpec& spec) {
    const Tensor& x = value(input);
    const Tensor& w = value(weights);
    const Tensor& b = value(bias);
    spec.validate(x.shape(), w.shape(), b.shape());

    Tensor out({x.shape()[0], spec.out_channels, spec.out_h(x.shape()[2]), spec.out_w(x.shape()[3])});
    conv2d_forward(x, w, b, spec, out);
    check_finite(out, "conv2d");

    auto fn = [xi = input.id, wi = weights.id, bi = bias.id, spec](const Tape& t,
                                                                   std::int32_t self,
                                                                   GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        const Tensor& x = t.value(Var{xi});
        const Tensor& w = t.value(Var{wi});
        conv2d_backward_input(gy, w, spec, g.slot(Var{xi}, x.shape()));
        conv2d_backward_weights(gy, x, spec, g.slot(Var{wi}, w.shape()));
        Tensor& gb = g.slot(Var{bi}, t.value(Var{bi}).shape());
        const std::int64_t B = gy.shape()[0], Cout = gy.shape()[1],
                           plane = gy.shape()[2] * gy.shape()[3];
        for (std::int64_t bb = 0; bb < B; ++bb) {
            for (std::int64_t co = 0; co < Cout; ++co) {
                const double* p = gy.data() + (bb * Cout + co) * plane;
                double acc = 0.0;
                for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
                gb[co] += acc;
            }
        }
    };
    return push(std::move(out), {input.id, weights.id, bias.id}, std::move(fn), "conv2d");
}

// ---------------------------------------------------------------------------
// batch norm

Var Tape::batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, Mode mode) {
    const Tensor& x = value(input);
    require(x.rank() == 4, "batch_norm: input must be B x C x H x W, got " + shape_str(x.shape()));
    const std::int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const Tensor& g = value(gamma);
    const Tensor& be = value(beta);
    require(g.rank() == 1 && g.numel() == C && be.rank() == 1 && be.numel() == C,
            "batch_norm: gamma/beta length must equal channel count " + std::to_string(C));
    require(state.running_mean.numel() == C && state.running_var.numel() == C,
            "batch_norm: state sized for " + std::to_string(state.running_mean.numel()) +
                " channels, input has " + std::to_string(C));
    const std::int64_t m = B * H * W;
    const double eps = state.epsilon;

    Tensor out(x.shape());
    Tensor xhat(x.shape());
    Tensor inv_std({C});

    if (mode == Mode::kTrain) {
        require(m >= 2, "batch_norm: train mode needs at least 2 elements per channel, got " +
                            std::to_string(m));
        for (std::int64_t c = 0; c < C; ++c) {
            double mean = 0.0;
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const double* p = x.data() + (bb * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) mean += p[i];
            }
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const double* p = x.data() + (bb * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[c] = is;
            const double gc = g[c], bc = be[c];
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const double* p = x.data() + (bb * C + c) * H * W;
                double* xh = xhat.data() + (bb * C + c) * H * W;
                double* o = out.data() + (bb * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    xh[i] = (p[i] - mean) * is;
                    o[i] = gc * xh[i] + bc;
                }
            }
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] +
                                    state.momentum * mean;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] +
                                   state.momentum * var;
        }
        state.batches_seen += 1;
    } else {
        if (state.batches_seen == 0) {
            throw NumericError("batch_norm: eval mode before any running stats were recorded");
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const double is = 1.0 / std::sqrt(state.running_var[c] + eps);
            inv_std[c] = is;
            const double mean = state.running_mean[c];
            const double gc = g[c], bc = be[c];
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const double* p = x.data() + (bb * C + c) * H * W;
                double* xh = xhat.data() + (bb * C + c) * H * W;
                double* o = out.data() + (bb * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    xh[i] = (p[i] - mean) * is;
                    o[i] = gc * xh[i] + bc;
                }
            }
        }
    }
    check_finite(out, "batch_norm");

    const bool train = mode == Mode::kTrain;
    auto fn = [xi = input.id, gi = gamma.id, bi = beta.id, xhat = std::move(xhat),
               inv_std = std::move(inv_std), train, B, C, H, W](const Tape& t, std::int32_t self,
                                                                GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        const Tensor& gv = t.value(Var{gi});
        Tensor& gx = g.slot(Var{xi}, t.value(Var{xi}).shape());
        Tensor& gg = g.slot(Var{gi}, gv.shape());
        Tensor& gb = g.slot(Var{bi}, gv.shape());
        const std::int64_t m = B * H * W;
        for (std::int64_t c = 0; c < C; ++c) {
            double s1 = 0.0, s2 = 0.0;  // sum(gy), sum(gy * xhat)
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const double* gyp = gy.data() + (bb * C + c) * H * W;
                const double* xh = xhat.data() + (bb * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    s1 += gyp[i];
                    s2 += gyp[i] * xh[i];
                }
            }
            gb[c] += s1;
            gg[c] += s2;
            const double gc = gv[c], is = inv_std[c];
            if (train) {
                const double mean_gy = s1 / static_cast<double>(m);
                const double mean_gy_xhat = s2 / static_cast<double>(m);
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    const double* gyp = gy.data() + (bb * C + c) * H * W;
                    const double* xh = xhat.data() + (bb * C + c) * H * W;
                    double* gxp = gx.data() + (bb * C + c) * H * W;
                    for (std::int64_t i = 0; i < H * W; ++i) {
                        gxp[i] += gc * is * (gyp[i] - mean_gy - xh[i] * mean_gy_xhat);
                    }
                }
            } else {
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    const double* gyp = gy.data() + (bb * C + c) * H * W;
                    double* gxp = gx.data() + (bb * C + c) * H * W;
                    for (std::int64_t i = 0; i < H * W; ++i) {
                        gxp[i] += gc * is * gyp[i];
                    }
                }
            }
        }
    };
    return push(std::move(out), {input.id, gamma.id, beta.id}, std::move(fn), "batch_norm");
}

// ---------------------------------------------------------------------------
// elementwise and structural ops

Var Tape::relu(Var x) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    const std::int64_t n = xv.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    check_finite(out, "relu");
    auto fn = [xi = x.id](const Tape& t, std::int32_t self, GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        const Tensor& xv = t.value(Var{xi});
        Tensor& gx = g.slot(Var{xi}, xv.shape());
        for (std::int64_t i = 0; i < xv.numel(); ++i) {
            if (xv[i] > 0.0) gx[i] += gy[i];
        }
    };
    return push(std::move(out), {x.id}, std::move(fn), "relu");
}

Var Tape::sigmoid(Var x) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = stable_sigmoid(xv[i]);
    check_finite(out, "sigmoid");
    auto fn = [xi = x.id](const Tape& t, std::int32_t self, GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        const Tensor& y = t.value(Var{self});
        Tensor& gx = g.slot(Var{xi}, y.shape());
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            gx[i] += gy[i] * y[i] * (1.0 - y[i]);
        }
    };
    return push(std::move(out), {x.id}, std::move(fn), "sigmoid");
}

Var Tape::add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require(av.same_shape(bv),
            "add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    check_finite(out, "add");
    auto fn = [ai = a.id, bi = b.id](const Tape& t, std::int32_t self, GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        Tensor& ga = g.slot(Var{ai}, gy.shape());
        Tensor& gb = g.slot(Var{bi}, gy.shape());
        for (std::int64_t i = 0; i < gy.numel(); ++i) {
            ga[i] += gy[i];
            gb[i] += gy[i];
        }
    };
    return push(std::move(out), {a.id, b.id}, std::move(fn), "add");
}

Var Tape::mul_elementwise(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require(av.same_shape(bv), "mul_elementwise: shape mismatch " + shape_str(av.shape()) +
                                   " vs " + shape_str(bv.shape()));
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    check_finite(out, "mul_elementwise");
    auto fn = [ai = a.id, bi = b.id](const Tape& t, std::int32_t self, GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        const Tensor& av = t.value(Var{ai});
        const Tensor& bv = t.value(Var{bi});
        Tensor& ga = g.slot(Var{ai}, av.shape());
        Tensor& gb = g.slot(Var{bi}, bv.shape());
        for (std::int64_t i = 0; i < gy.numel(); ++i) {
            ga[i] += gy[i] * bv[i];
            gb[i] += gy[i] * av[i];
        }
    };
    return push(std::move(out), {a.id, b.id}, std::move(fn), "mul_elementwise");
}

Var Tape::scale(Var x, double factor) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = factor * xv[i];
    check_finite(out, "scale");
    auto fn = [xi = x.id, factor](const Tape& t, std::int32_t self, GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        Tensor& gx = g.slot(Var{xi}, t.value(Var{xi}).shape());
        for (std::int64_t i = 0; i < gy.numel(); ++i) gx[i] += factor * gy[i];
    };
    return push(std::move(out), {x.id}, std::move(fn), "scale");
}

Var Tape::concat_channels(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_channels: no inputs");
    const Tensor& first = value(parts[0]);
    require(first.rank() == 4, "concat_channels: inputs must be B x C x H x W");
    const std::int64_t B = first.shape()[0], H = first.shape()[2], W = first.shape()[3];
    std::int64_t C = 0;
    for (Var p : parts) {
        const Tensor& t = value(p);
        require(t.rank() == 4 && t.shape()[0] == B && t.shape()[2] == H && t.shape()[3] == W,
                "concat_channels: mismatched B/H/W, " + shape_str(first.shape()) + " vs " +
                    shape_str(t.shape()));
        C += t.shape()[1];
    }
    Tensor out({B, C, H, W});
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (Var p : parts) {
        const Tensor& t = value(p);
        const std::int64_t pc = t.shape()[1];
        offsets.push_back(off);
        for (std::int64_t bb = 0; bb < B; ++bb) {
            std::memcpy(out.data() + (bb * C + off) * H * W, t.data() + bb * pc * H * W,
                        static_cast<std::size_t>(pc * H * W) * sizeof(double));
        }
        off += pc;
    }
    std::vector<std::int32_t> parent_ids;
    for (Var p : parts) parent_ids.push_back(p.id);
    auto fn = [parent_ids, offsets, B, C, H, W](const Tape& t, std::int32_t self,
                                                GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        for (std::size_t k = 0; k < parent_ids.size(); ++k) {
            const Var p{parent_ids[k]};
            const Tensor& pv = t.value(p);
            const std::int64_t pc = pv.shape()[1];
            Tensor& gp = g.slot(p, pv.shape());
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const double* src = gy.data() + (bb * C + offsets[k]) * H * W;
                double* dst = gp.data() + bb * pc * H * W;
                for (std::int64_t i = 0; i < pc * H * W; ++i) dst[i] += src[i];
            }
        }
    };
    return push(std::move(out), std::move(parent_ids), std::move(fn), "concat_channels");
}

Var Tape::slice_channels(Var x, std::int64_t begin, std::int64_t end) {
    const Tensor& xv = value(x);
    require(xv.rank() == 4, "slice_channels: input must be B x C x H x W");
    const std::int64_t B = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
    require(0 <= begin && begin < end && end <= C,
            "slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                ") invalid for " + std::to_string(C) + " channels");
    const std::int64_t pc = end - begin;
    Tensor out({B, pc, H, W});
    for (std::int64_t bb = 0; bb < B; ++bb) {
        std::memcpy(out.data() + bb * pc * H * W, xv.data() + (bb * C + begin) * H * W,
                    static_cast<std::size_t>(pc * H * W) * sizeof(double));
    }
    auto fn = [xi = x.id, begin, pc, B, C, H, W](const Tape& t, std::int32_t self,
                                                 GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        Tensor& gx = g.slot(Var{xi}, t.value(Var{xi}).shape());
        for (std::int64_t bb = 0; bb < B; ++bb) {
            const double* src = gy.data() + bb * pc * H * W;
            double* dst = gx.data() + (bb * C + begin) * H * W;
            for (std::int64_t i = 0; i < pc * H * W; ++i) dst[i] += src[i];
        }
    };
    return push(std::move(out), {x.id}, std::move(fn), "slice_channels");
}

Var Tape::max_pool_2x2(Var x) {
    const Tensor& xv = value(x);
    require(xv.rank() == 4, "max_pool_2x2: input must be B x C x H x W");
    const std::int64_t B = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
    require(H % 2 == 0 && W % 2 == 0,
            "max_pool_2x2: spatial extents must be even, got " + shape_str(xv.shape()));
    const std::int64_t OH = H / 2, OW = W / 2;
    Tensor out({B, C, OH, OW});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* in_plane = xv.data() + bc * H * W;
        double* out_plane = out.data() + bc * OH * OW;
        std::int64_t* am = argmax.data() + bc * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                // first maximum in row-major scan wins ties
                std::int64_t best = (2 * oh) * W + 2 * ow;
                double bv = in_plane[best];
                const std::int64_t cands[3] = {(2 * oh) * W + 2 * ow + 1,
                                               (2 * oh + 1) * W + 2 * ow,
                                               (2 * oh + 1) * W + 2 * ow + 1};
                for (std::int64_t cand : cands) {
                    if (in_plane[cand] > bv) {
                        bv = in_plane[cand];
                        best = cand;
                    }
                }
                out_plane[oh * OW + ow] = bv;
                am[oh * OW + ow] = bc * H * W + best;
            }
        }
    }
    auto fn = [xi = x.id, argmax = std::move(argmax)](const Tape& t, std::int32_t self,
                                                      GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        Tensor& gx = g.slot(Var{xi}, t.value(Var{xi}).shape());
        for (std::int64_t i = 0; i < gy.numel(); ++i) {
            gx[argmax[static_cast<std::size_t>(i)]] += gy[i];
        }
    };
    return push(std::move(out), {x.id}, std::move(fn), "max_pool_2x2");
}

namespace {

// align-corners-false source coordinates for 2x upsampling
struct LerpAxis {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1 - w1
};

LerpAxis lerp_axis_2x(std::int64_t in_extent) {
    LerpAxis a;
    const std::int64_t out = 2 * in_extent;
    a.i0.resize(static_cast<std::size_t>(out));
    a.i1.resize(static_cast<std::size_t>(out));
    a.w1.resize(static_cast<std::size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
        const double src = 0.5 * static_cast<double>(o) - 0.25;
        double f = std::floor(src);
        double frac = src - f;
        std::int64_t lo = static_cast<std::int64_t>(f);
        std::int64_t hi = lo + 1;
        if (lo < 0) lo = 0;
        if (hi > in_extent - 1) hi = in_extent - 1;
        if (lo > in_extent - 1) lo = in_extent - 1;
        a.i0[static_cast<std::size_t>(o)] = lo;
        a.i1[static_cast<std::size_t>(o)] = hi;
        a.w1[static_cast<std::size_t>(o)] = frac;
    }
    return a;
}

}  // namespace

Var Tape::upsample_bilinear_2x(Var x) {
    const Tensor& xv = value(x);
    require(xv.rank() == 4, "upsample_bilinear_2x: input must be B x C x H x W");
    const std::int64_t B = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
    const std::int64_t OH = 2 * H, OW = 2 * W;
    const LerpAxis ay = lerp_axis_2x(H);
    const LerpAxis ax = lerp_axis_2x(W);
    Tensor out({B, C, OH, OW});
    const std::int64_t work = B * C * OH * OW;
#pragma omp parallel for schedule(static) if (work > kParallelMacs)
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* in_plane = xv.data() + bc * H * W;
        double* out_plane = out.data() + bc * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
            const double* r0 = in_plane + ay.i0[static_cast<std::size_t>(oh)] * W;
            const double* r1 = in_plane + ay.i1[static_cast<std::size_t>(oh)] * W;
            const double wy1 = ay.w1[static_cast<std::size_t>(oh)];
            const double wy0 = 1.0 - wy1;
            double* orow = out_plane + oh * OW;
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                const std::int64_t x0 = ax.i0[static_cast<std::size_t>(ow)];
                const std::int64_t x1 = ax.i1[static_cast<std::size_t>(ow)];
                const double wx1 = ax.w1[static_cast<std::size_t>(ow)];
                const double wx0 = 1.0 - wx1;
                orow[ow] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) +
                           wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    auto fn = [xi = x.id, ay, ax, B, C, H, W, OH, OW](const Tape& t, std::int32_t self,
                                                      GradientMap& g) {
        const Tensor& gy = g.at(Var{self});
        Tensor& gx = g.slot(Var{xi}, t.value(Var{xi}).shape());
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
            const double* gy_plane = gy.data() + bc * OH * OW;
            double* gx_plane = gx.data() + bc * H * W;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                double* r0 = gx_plane + ay.i0[static_cast<std::size_t>(oh)] * W;
                double* r1 = gx_plane + ay.i1[static_cast<std::size_t>(oh)] * W;
                const double wy1 = ay.w1[static_cast<std::size_t>(oh)];
                const double wy0 = 1.0 - wy1;
                const double* grow = gy_plane + oh * OW;
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    const std::int64_t x0 = ax.i0[static_cast<std::size_t>(ow)];
                    const std::int64_t x1 = ax.i1[static_cast<std::size_t>(ow)];
                    const double wx1 = ax.w1[static_cast<std::size_t>(ow)];
                    const double wx0 = 1.0 - wx1;
                    const double gv = grow[ow];
                    r0[x0] += wy0 * wx0 * gv;
                    r0[x1] += wy0 * wx1 * gv;
                    r1[x0] += wy1 * wx0 * gv;
                    r1[x1] += wy1 * wx1 * gv;
                }
            }
        }
    };
    return push(std::move(out), {x.id}, std::move(fn), "upsample_bilinear_2x");
}

Var Tape::sum(Var x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    Tensor out = Tensor::scalar(acc);
    check_finite(out, "sum");
    auto fn = [xi = x.id](const Tape& t, std::int32_t self, GradientMap& g) {
        const double gy = g.at(Var{self})[0];
        Tensor& gx = g.slot(Var{xi}, t.value(Var{xi}).shape());
        for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gy;
    };
    return push(std::move(out), {x.id}, std::move(fn), "sum");
}

double total_variation(const Tensor& probs) {
    if (probs.rank() != 4 || probs.shape()[1] != 1) {
        throw ShapeError("total_variation: expected B x 1 x H x W, got " +
                         shape_str(probs.shape()));
    }
    const std::int64_t B = probs.shape()[0], H = probs.shape()[2], W = probs.shape()[3];
    if (H < 2 || W < 2) {
        throw ShapeError("total_variation: spatial extents must be >= 2, got " +
                         shape_str(probs.shape()));
    }
    double acc = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const double* plane = probs.data() + b * H * W;
        for (std::int64_t h = 0; h < H; ++h) {
            for (std::int64_t w = 0; w < W; ++w) {
                const double v = plane[h * W + w];
                if (w + 1 < W) acc += std::abs(plane[h * W + w + 1] - v);
                if (h + 1 < H) acc += std::abs(plane[(h + 1) * W + w] - v);
            }
        }
    }
    return acc / static_cast<double>(B * H * W);
}

}  // namespace pemf
