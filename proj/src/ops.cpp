#include "gi2i/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace gi2i::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

bool tracked(const Tape* tape, const Tensor& t) { return tape != nullptr && t.node() >= 0; }

Tensor make_output(Shape shape) { return Tensor(std::move(shape)); }

void require_4d(const Tensor& t, const char* what) {
    if (t.ndim() != 4) throw DimensionError(std::string(what) + " must be 4-d, got " + shape_str(t.shape()));
}

// Gathers conv patches of sample n into cols (C*kh*kw x Ho*Wo, column-major).
void im2col(const Tensor& x, int n, int kh, int kw, int stride, int pad,
            int Ho, int Wo, Eigen::MatrixXd& cols) {
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    cols.setZero(static_cast<Eigen::Index>(C) * kh * kw, static_cast<Eigen::Index>(Ho) * Wo);
    const double* xp = x.data() + static_cast<std::int64_t>(n) * C * H * W;
    for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
            const Eigen::Index col = static_cast<Eigen::Index>(ho) * Wo + wo;
            double* dst = cols.data() + col * cols.rows();
            for (int c = 0; c < C; ++c) {
                const double* xc = xp + static_cast<std::int64_t>(c) * H * W;
                for (int i = 0; i < kh; ++i) {
                    const int hi = ho * stride + i - pad;
                    if (hi < 0 || hi >= H) {
                        dst += kw;
                        continue;
                    }
                    const int w0 = wo * stride - pad;
                    for (int j = 0; j < kw; ++j) {
                        const int wi = w0 + j;
                        *dst++ = (wi >= 0 && wi < W) ? xc[hi * W + wi] : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-adds cols back into the gradient of sample n (inverse of im2col).
void col2im_add(double* gx, int C, int H, int W, int n, int kh, int kw, int stride,
                int pad, int Ho, int Wo, const Eigen::MatrixXd& cols) {
    double* gp = gx + static_cast<std::int64_t>(n) * C * H * W;
    for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
            const Eigen::Index col = static_cast<Eigen::Index>(ho) * Wo + wo;
            const double* src = cols.data() + col * cols.rows();
            for (int c = 0; c < C; ++c) {
                double* gc = gp + static_cast<std::int64_t>(c) * H * W;
                for (int i = 0; i < kh; ++i) {
                    const int hi = ho * stride + i - pad;
                    if (hi < 0 || hi >= H) {
                        src += kw;
                        continue;
                    }
                    const int w0 = wo * stride - pad;
                    for (int j = 0; j < kw; ++j) {
                        const int wi = w0 + j;
                        if (wi >= 0 && wi < W) gc[hi * W + wi] += *src;
                        ++src;
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad, Tape* tape) {
    require_4d(input, "conv2d input");
    require_4d(kernel, "conv2d kernel");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int F = kernel.dim(0), kC = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kC != C) throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                                      " vs kernel " + shape_str(kernel.shape()));
    if (bias.ndim() != 1 || bias.dim(0) != F) throw DimensionError("conv2d bias must be [F]");
    if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d kernel extents must be odd");
    if (stride != 1 && stride != 2) throw DimensionError("conv2d stride must be 1 or 2");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw DimensionError("conv2d output would be empty");

    Tensor out = make_output({N, F, Ho, Wo});
    const Eigen::Index ckk = static_cast<Eigen::Index>(C) * kh * kw;
    ConstRowMap km(kernel.data(), F, ckk);
    Eigen::Map<const Eigen::VectorXd> bv(bias.data(), F);
    Eigen::MatrixXd cols;
    for (int n = 0; n < N; ++n) {
        im2col(input, n, kh, kw, stride, pad, Ho, Wo, cols);
        RowMap om(out.data() + static_cast<std::int64_t>(n) * F * Ho * Wo, F,
                  static_cast<Eigen::Index>(Ho) * Wo);
        om.noalias() = km * cols;
        om.colwise() += bv;
    }

    const bool needs = tracked(tape, input) || tracked(tape, kernel) || tracked(tape, bias);
    if (needs) {
        Tensor in_c = input;
        Tensor k_c = kernel;
        const int in_node = input.node(), k_node = kernel.node(), b_node = bias.node();
        const bool in_t = tracked(tape, input), k_t = tracked(tape, kernel), b_t = tracked(tape, bias);
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            Eigen::MatrixXd cols2;
            ConstRowMap km2(k_c.data(), F, ckk);
            for (int n = 0; n < N; ++n) {
                ConstRowMap gm(gout.data() + static_cast<std::int64_t>(n) * F * Ho * Wo, F,
                               static_cast<Eigen::Index>(Ho) * Wo);
                if (b_t) {
                    Eigen::Map<Eigen::VectorXd> gb(tp.grad_of(b_node).data(), F);
                    gb.noalias() += gm.rowwise().sum();
                }
                if (k_t || in_t) im2col(in_c, n, kh, kw, stride, pad, Ho, Wo, cols2);
                if (k_t) {
                    RowMap gk(tp.grad_of(k_node).data(), F, ckk);
                    gk.noalias() += gm * cols2.transpose();
                }
                if (in_t) {
                    Eigen::MatrixXd gcols = km2.transpose() * gm;
                    col2im_add(tp.grad_of(in_node).data(), C, H, W, n, kh, kw, stride, pad, Ho, Wo, gcols);
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor group_norm(const Tensor& input, int groups, double eps, Tape* tape) {
    require_4d(input, "group_norm input");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (groups <= 0 || C % groups != 0) {
        throw ConfigError("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                          std::to_string(groups));
    }
    if (!(eps > 0)) throw ConfigError("group_norm: eps must be positive");
    const int cs = C / groups;
    const std::int64_t m = static_cast<std::int64_t>(cs) * H * W;

    Tensor out = make_output(input.shape());
    std::vector<double> inv_std(static_cast<std::size_t>(N) * groups);
    const double* xp = input.data();
    double* yp = out.data();
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + static_cast<std::int64_t>(g) * cs) * H * W;
            double mean = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mean += xp[base + i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                const double d = xp[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(n) * groups + g] = is;
            for (std::int64_t i = 0; i < m; ++i) yp[base + i] = (xp[base + i] - mean) * is;
        }
    }

    if (tracked(tape, input)) {
        Tensor out_c = out;
        const int in_node = input.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            const double* yv = out_c.data();
            for (int n = 0; n < N; ++n) {
                for (int g = 0; g < groups; ++g) {
                    const std::int64_t base =
                        (static_cast<std::int64_t>(n) * C + static_cast<std::int64_t>(g) * cs) * H * W;
                    const double is = inv_std[static_cast<std::size_t>(n) * groups + g];
                    double gsum = 0.0, gysum = 0.0;
                    for (std::int64_t i = 0; i < m; ++i) {
                        gsum += gout[base + i];
                        gysum += gout[base + i] * yv[base + i];
                    }
                    const double gmean = gsum / static_cast<double>(m);
                    const double gymean = gysum / static_cast<double>(m);
                    for (std::int64_t i = 0; i < m; ++i) {
                        gx[base + i] += is * (gout[base + i] - gmean - yv[base + i] * gymean);
                    }
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias, Tape* tape) {
    if (input.ndim() != 2 || weight.ndim() != 2 || bias.ndim() != 1) {
        throw DimensionError("dense expects input [N,D], weight [D,E], bias [E]");
    }
    const int N = input.dim(0), D = input.dim(1), E = weight.dim(1);
    if (weight.dim(0) != D || bias.dim(0) != E) {
        throw DimensionError("dense dimension mismatch: input " + shape_str(input.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    }
    Tensor out = make_output({N, E});
    ConstRowMap xm(input.data(), N, D);
    ConstRowMap wm(weight.data(), D, E);
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data(), E);
    RowMap om(out.data(), N, E);
    om.noalias() = xm * wm;
    om.rowwise() += bv;

    const bool in_t = tracked(tape, input), w_t = tracked(tape, weight), b_t = tracked(tape, bias);
    if (in_t || w_t || b_t) {
        Tensor in_c = input, w_c = weight;
        const int in_node = input.node(), w_node = weight.node(), b_node = bias.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            ConstRowMap gm(gout.data(), N, E);
            if (in_t) {
                RowMap gx(tp.grad_of(in_node).data(), N, D);
                ConstRowMap wm2(w_c.data(), D, E);
                gx.noalias() += gm * wm2.transpose();
            }
            if (w_t) {
                RowMap gw(tp.grad_of(w_node).data(), D, E);
                ConstRowMap xm2(in_c.data(), N, D);
                gw.noalias() += xm2.transpose() * gm;
            }
            if (b_t) {
                Eigen::Map<Eigen::RowVectorXd> gb(tp.grad_of(b_node).data(), E);
                gb.noalias() += gm.colwise().sum();
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor silu(const Tensor& input, Tape* tape) {
    Tensor out = make_output(input.shape());
    const std::int64_t n = input.numel();
    const double* xp = input.data();
    double* yp = out.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-xp[i]));
        yp[i] = xp[i] * s;
    }
    if (tracked(tape, input)) {
        Tensor in_c = input;
        const int in_node = input.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            const double* x = in_c.data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x[i]));
                gx[i] += gout[static_cast<std::size_t>(i)] * s * (1.0 + x[i] * (1.0 - s));
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = make_output(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    const bool a_t = tracked(tape, a), b_t = tracked(tape, b);
    if (a_t || b_t) {
        const int an = a.node(), bn = b.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            if (a_t) {
                double* g = tp.grad_of(an).data();
                for (std::int64_t i = 0; i < n; ++i) g[i] += gout[static_cast<std::size_t>(i)];
            }
            if (b_t) {
                double* g = tp.grad_of(bn).data();
                for (std::int64_t i = 0; i < n; ++i) g[i] += gout[static_cast<std::size_t>(i)];
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor scale(const Tensor& a, double c, Tape* tape) {
    Tensor out = make_output(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * c;
    if (tracked(tape, a)) {
        const int an = a.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* g = tp.grad_of(an).data();
            for (std::int64_t i = 0; i < n; ++i) g[i] += c * gout[static_cast<std::size_t>(i)];
        });
        out.set_node(id);
    }
    return out;
}

Tensor sum(const Tensor& a, Tape* tape) {
    double s = 0.0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += a[i];
    Tensor out = Tensor::scalar(s);
    if (tracked(tape, a)) {
        const int an = a.node();
        int id = tape->push(1, [=](Tape& tp, const std::vector<double>& gout) {
            double* g = tp.grad_of(an).data();
            for (std::int64_t i = 0; i < n; ++i) g[i] += gout[0];
        });
        out.set_node(id);
    }
    return out;
}

Tensor mean(const Tensor& a, Tape* tape) {
    Tensor s = sum(a, tape);
    return scale(s, 1.0 / static_cast<double>(a.numel()), tape);
}

Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape) {
    require_4d(a, "concat_channels a");
    require_4d(b, "concat_channels b");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw DimensionError("concat_channels mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor out = make_output({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data() + n * Ca * hw, Ca * hw, out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw);
        std::copy_n(b.data() + n * Cb * hw, Cb * hw,
                    out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
    }
    const bool a_t = tracked(tape, a), b_t = tracked(tape, b);
    if (a_t || b_t) {
        const int an = a.node(), bn = b.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            for (int n = 0; n < N; ++n) {
                const double* gslice = gout.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw;
                if (a_t) {
                    double* ga = tp.grad_of(an).data() + n * Ca * hw;
                    for (std::int64_t i = 0; i < Ca * hw; ++i) ga[i] += gslice[i];
                }
                if (b_t) {
                    double* gb = tp.grad_of(bn).data() + n * Cb * hw;
                    for (std::int64_t i = 0; i < Cb * hw; ++i) gb[i] += gslice[Ca * hw + i];
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor channel_affine(const Tensor& h, const Tensor& scale_shift, Tape* tape) {
    require_4d(h, "channel_affine input");
    const int N = h.dim(0), C = h.dim(1), H = h.dim(2), W = h.dim(3);
    if (scale_shift.ndim() != 2 || scale_shift.dim(0) != N || scale_shift.dim(1) != 2 * C) {
        throw ConfigError("channel_affine expects scale_shift [N,2C], got " + shape_str(scale_shift.shape()) +
                          " for input " + shape_str(h.shape()));
    }
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor out = make_output(h.shape());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double ks = scale_shift[static_cast<std::int64_t>(n) * 2 * C + c];
            const double kb = scale_shift[static_cast<std::int64_t>(n) * 2 * C + C + c];
            const double* hp = h.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            double* op = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) op[i] = ks * hp[i] + kb;
        }
    }
    const bool h_t = tracked(tape, h), ss_t = tracked(tape, scale_shift);
    if (h_t || ss_t) {
        Tensor h_c = h, ss_c = scale_shift;
        const int hn = h.node(), ssn = scale_shift.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    const double ks = ss_c[static_cast<std::int64_t>(n) * 2 * C + c];
                    if (h_t) {
                        double* gh = tp.grad_of(hn).data() + base;
                        for (std::int64_t i = 0; i < hw; ++i) gh[i] += ks * gout[base + i];
                    }
                    if (ss_t) {
                        double gks = 0.0, gkb = 0.0;
                        const double* hp = h_c.data() + base;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            gks += gout[base + i] * hp[i];
                            gkb += gout[base + i];
                        }
                        double* gss = tp.grad_of(ssn).data();
                        gss[static_cast<std::int64_t>(n) * 2 * C + c] += gks;
                        gss[static_cast<std::int64_t>(n) * 2 * C + C + c] += gkb;
                    }
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor upsample2x(const Tensor& input, Tape* tape) {
    require_4d(input, "upsample2x input");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out = make_output({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* ip = input.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
            double* op = out.data() + (static_cast<std::int64_t>(n) * C + c) * 4 * H * W;
            for (int i = 0; i < H; ++i) {
                for (int j = 0; j < W; ++j) {
                    const double v = ip[i * W + j];
                    op[(2 * i) * 2 * W + 2 * j] = v;
                    op[(2 * i) * 2 * W + 2 * j + 1] = v;
                    op[(2 * i + 1) * 2 * W + 2 * j] = v;
                    op[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
                }
            }
        }
    }
    if (tracked(tape, input)) {
        const int in_node = input.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const std::int64_t ib = (static_cast<std::int64_t>(n) * C + c) * H * W;
                    const std::int64_t ob = (static_cast<std::int64_t>(n) * C + c) * 4 * H * W;
                    for (int i = 0; i < H; ++i) {
                        for (int j = 0; j < W; ++j) {
                            gx[ib + i * W + j] += gout[ob + (2 * i) * 2 * W + 2 * j] +
                                                  gout[ob + (2 * i) * 2 * W + 2 * j + 1] +
                                                  gout[ob + (2 * i + 1) * 2 * W + 2 * j] +
                                                  gout[ob + (2 * i + 1) * 2 * W + 2 * j + 1];
                        }
                    }
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor global_mean_pool(const Tensor& input, Tape* tape) {
    require_4d(input, "global_mean_pool input");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor out = make_output({N, C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* ip = input.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            double s = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) s += ip[i];
            out[static_cast<std::int64_t>(n) * C + c] = s / static_cast<double>(hw);
        }
    }
    if (tracked(tape, input)) {
        const int in_node = input.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            const double inv = 1.0 / static_cast<double>(hw);
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const double g = gout[static_cast<std::size_t>(n) * C + c] * inv;
                    double* gp = gx + (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) gp[i] += g;
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor log_softmax(const Tensor& logits, Tape* tape) {
    if (logits.ndim() != 2) throw DimensionError("log_softmax expects [N,K]");
    const int N = logits.dim(0), K = logits.dim(1);
    Tensor out = make_output(logits.shape());
    for (int n = 0; n < N; ++n) {
        const double* xp = logits.data() + static_cast<std::int64_t>(n) * K;
        double* yp = out.data() + static_cast<std::int64_t>(n) * K;
        double mx = xp[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xp[k]);
        double lse = 0.0;
        for (int k = 0; k < K; ++k) lse += std::exp(xp[k] - mx);
        lse = mx + std::log(lse);
        for (int k = 0; k < K; ++k) yp[k] = xp[k] - lse;
    }
    if (tracked(tape, logits)) {
        Tensor out_c = out;
        const int in_node = logits.node();
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            for (int n = 0; n < N; ++n) {
                const std::int64_t base = static_cast<std::int64_t>(n) * K;
                double gsum = 0.0;
                for (int k = 0; k < K; ++k) gsum += gout[base + k];
                for (int k = 0; k < K; ++k) {
                    gx[base + k] += gout[base + k] - std::exp(out_c[base + k]) * gsum;
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor nll_loss(const Tensor& logp, const std::vector<int>& labels, Tape* tape) {
    if (logp.ndim() != 2) throw DimensionError("nll_loss expects [N,K] log-probabilities");
    const int N = logp.dim(0), K = logp.dim(1);
    if (static_cast<int>(labels.size()) != N) throw DimensionError("nll_loss labels size mismatch");
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const int k = labels[static_cast<std::size_t>(n)];
        if (k < 0 || k >= K) throw InputError("nll_loss label out of range: " + std::to_string(k));
        loss -= logp[static_cast<std::int64_t>(n) * K + k];
    }
    loss /= static_cast<double>(N);
    Tensor out = Tensor::scalar(loss);
    if (tracked(tape, logp)) {
        const int in_node = logp.node();
        std::vector<int> lbl = labels;
        int id = tape->push(1, [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            const double g = gout[0] / static_cast<double>(N);
            for (int n = 0; n < N; ++n) {
                gx[static_cast<std::int64_t>(n) * K + lbl[static_cast<std::size_t>(n)]] -= g;
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor select_scalar(const Tensor& t, std::int64_t flat_index, Tape* tape) {
    if (flat_index < 0 || flat_index >= t.numel()) throw InputError("select_scalar index out of range");
    Tensor out = Tensor::scalar(t[flat_index]);
    if (tracked(tape, t)) {
        const int in_node = t.node();
        int id = tape->push(1, [=](Tape& tp, const std::vector<double>& gout) {
            tp.grad_of(in_node)[static_cast<std::size_t>(flat_index)] += gout[0];
        });
        out.set_node(id);
    }
    return out;
}

Tensor pnorm_loss(const Tensor& pred, const Tensor& target, int p, Tape* tape) {
    if (pred.shape() != target.shape()) {
        throw DimensionError("pnorm_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    }
    if (p != 1 && p != 2) throw ConfigError("pnorm_loss: p must be 1 or 2");
    const std::int64_t n = pred.numel();
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pred[i] - target[i];
        loss += (p == 2) ? d * d : std::abs(d);
    }
    loss /= static_cast<double>(n);
    Tensor out = Tensor::scalar(loss);
    if (tracked(tape, pred)) {
        Tensor p_c = pred, t_c = target;
        const int in_node = pred.node();
        int id = tape->push(1, [=](Tape& tp, const std::vector<double>& gout) {
            double* gx = tp.grad_of(in_node).data();
            const double g = gout[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double d = p_c[i] - t_c[i];
                if (p == 2) {
                    gx[i] += 2.0 * d * g;
                } else {
                    gx[i] += (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * g;
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& labels, Tape* tape) {
    if (table.ndim() != 2) throw DimensionError("embed_rows expects table [K,E]");
    const int K = table.dim(0), E = table.dim(1);
    const int N = static_cast<int>(labels.size());
    Tensor out = make_output({N, E});
    for (int n = 0; n < N; ++n) {
        const int k = labels[static_cast<std::size_t>(n)];
        if (k >= K) throw InputError("embed_rows label " + std::to_string(k) + " out of range [0," +
                                     std::to_string(K) + ")");
        if (k >= 0) {
            std::copy_n(table.data() + static_cast<std::int64_t>(k) * E, E,
                        out.data() + static_cast<std::int64_t>(n) * E);
        }
    }
    if (tracked(tape, table)) {
        const int in_node = table.node();
        std::vector<int> lbl = labels;
        int id = tape->push(out.numel(), [=](Tape& tp, const std::vector<double>& gout) {
            double* gt = tp.grad_of(in_node).data();
            for (int n = 0; n < N; ++n) {
                const int k = lbl[static_cast<std::size_t>(n)];
                if (k < 0) continue;
                for (int e = 0; e < E; ++e) {
                    gt[static_cast<std::int64_t>(k) * E + e] += gout[static_cast<std::int64_t>(n) * E + e];
                }
            }
        });
        out.set_node(id);
    }
    return out;
}

GradCheckReport grad_check(const std::function<Tensor(Tape&, Tensor&)>& f,
                           const Tensor& point, double h, double tol,
                           int max_coords, std::uint64_t subset_seed) {
    GradCheckReport report;
    Tensor x = point.clone();
    std::vector<double> analytic;
    {
        Tape tape;
        tape.watch(x);
        Tensor loss = f(tape, x);
        if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
        tape.backward(loss);
        analytic.assign(x.grad(), x.grad() + x.numel());
    }

    std::vector<std::int64_t> coords(static_cast<std::size_t>(point.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords > 0 && max_coords < static_cast<int>(coords.size())) {
        std::mt19937_64 eng(subset_seed);
        for (int i = 0; i < max_coords; ++i) {
            std::uniform_int_distribution<std::size_t> dist(static_cast<std::size_t>(i), coords.size() - 1);
            std::swap(coords[static_cast<std::size_t>(i)], coords[dist(eng)]);
        }
        coords.resize(static_cast<std::size_t>(max_coords));
    }

    auto eval = [&](Tensor& pt) {
        Tape tape;
        Tensor loss = f(tape, pt);
        return loss.value();
    };

    double max_rel = 0.0;
    for (std::int64_t i : coords) {
        Tensor xp = point.clone();
        Tensor xm = point.clone();
        xp[i] += h;
        xm[i] -= h;
        const double numeric = (eval(xp) - eval(xm)) / (2.0 * h);
        const double ga = analytic[static_cast<std::size_t>(i)];
        const double denom = std::max({std::abs(ga), std::abs(numeric), 1e-6});
        const double rel = std::abs(ga - numeric) / denom;
        if (rel > max_rel) {
            max_rel = rel;
            report.worst_index = i;
            report.analytic = ga;
            report.numeric = numeric;
        }
    }
    report.max_rel_error = max_rel;
    report.coords_checked = static_cast<int>(coords.size());
    report.pass = max_rel <= tol;
    return report;
}

}  // namespace gi2i::ops
