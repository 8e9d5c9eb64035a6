#pragma once

#include <functional>
#include <vector>

#include "gi2i/tensor.hpp"

namespace gi2i::ops {

// Differentiable ops. Each takes an optional tape; with tape == nullptr the
// forward value is computed without recording. Inputs that carry no node id
// are treated as constants and receive no gradient.

// Cross-correlation (deep-learning convention, no kernel flip).
// input [N,C,H,W], kernel [F,C,kh,kw], bias [F]; stride in {1,2}; kh,kw odd.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad, Tape* tape = nullptr);

// Per (sample, group) normalization: (x - mean) / sqrt(var + eps).
Tensor group_norm(const Tensor& input, int groups, double eps, Tape* tape = nullptr);

// input [N,D] x weight [D,E] + bias [E].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias,
             Tape* tape = nullptr);

Tensor silu(const Tensor& input, Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, double c, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);
Tensor mean(const Tensor& a, Tape* tape = nullptr);

// Concatenate along the channel axis of [N,C,H,W] tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Per-sample per-channel affine: out[n,c,·] = ss[n,c] * h[n,c,·] + ss[n,C+c],
// with h [N,C,H,W] and scale_shift [N,2C].
Tensor channel_affine(const Tensor& h, const Tensor& scale_shift, Tape* tape = nullptr);

// Nearest-neighbor 2x upsample of [N,C,H,W].
Tensor upsample2x(const Tensor& input, Tape* tape = nullptr);

// [N,C,H,W] -> [N,C] spatial mean.
Tensor global_mean_pool(const Tensor& input, Tape* tape = nullptr);

// Row-wise log-softmax of [N,K].
Tensor log_softmax(const Tensor& logits, Tape* tape = nullptr);

// Mean over the batch of -logp[n, labels[n]]; logp is [N,K] log-probabilities.
Tensor nll_loss(const Tensor& logp, const std::vector<int>& labels, Tape* tape = nullptr);

// Scalar pick of one element by flat index.
Tensor select_scalar(const Tensor& t, std::int64_t flat_index, Tape* tape = nullptr);

// mean(|pred - target|^p) with p in {1,2}; target is a constant.
Tensor pnorm_loss(const Tensor& pred, const Tensor& target, int p, Tape* tape = nullptr);

// Table row gather: labels[n] selects a row of table [K,E]; label -1 yields a
// zero row and routes no gradient (the null-class path).
Tensor embed_rows(const Tensor& table, const std::vector<int>& labels, Tape* tape = nullptr);

// Gradient verification against central finite differences. f must evaluate
// a scalar loss of `point` on the provided tape. When max_coords > 0 only a
// seeded random subset of coordinates is probed (large parameter tensors).
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    int coords_checked = 0;
    bool pass = false;
};

GradCheckReport grad_check(const std::function<Tensor(Tape&, Tensor&)>& f,
                           const Tensor& point, double h, double tol,
                           int max_coords = 0, std::uint64_t subset_seed = 0);

}  // namespace gi2i::ops
