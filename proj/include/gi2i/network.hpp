#pragma once

#include <map>
#include <string>
#include <vector>

#include "gi2i/ops.hpp"
#include "gi2i/tensor.hpp"

namespace gi2i {

inline constexpr double kNormEps = 1e-5;

// Sentinel label meaning "no class": the conditioning reduces to the timestep
// embedding alone and no gradient reaches the class table.
inline constexpr int kNullClass = -1;

struct NetworkConfig {
    int in_channels_x = 2;
    int out_channels_y = 2;
    int base_width = 16;
    int depth = 2;  // number of 2x downsamplings
    int groups = 4;
    int embed_dim = 32;
    int num_classes = 1;
    int image_size = 16;

    void validate() const;
    int width_at(int level) const { return base_width << level; }
};

// Named-parameter container shared by the denoiser and the classifier.
// std::map keeps iteration order deterministic for init, IO and updates.
using ParamMap = std::map<std::string, Tensor>;

struct DenoiserModel {
    NetworkConfig config;
    ParamMap params;

    static DenoiserModel init(const NetworkConfig& cfg, RngState& rng);
    Tensor& p(const std::string& name);
    const Tensor& p(const std::string& name) const;
    void watch_all(Tape& tape);
};

struct ClassifierModel {
    NetworkConfig config;  // num_classes = size of the label vocabulary
    ParamMap params;

    static ClassifierModel init(const NetworkConfig& cfg, RngState& rng);
    Tensor& p(const std::string& name);
    const Tensor& p(const std::string& name) const;
    void watch_all(Tape& tape);
};

// Sinusoidal embedding: pairs (sin, cos) of t*omega_j with geometrically
// spaced frequencies. Requires 1 <= t <= T and even embed_dim.
Tensor timestep_embedding(int t, int embed_dim, int T);

// Row lookup into the class table; see ops::embed_rows for the batched form.
Tensor class_embedding(int k, const Tensor& table);

// AdaGN: (k_s, k_b) = split(proj(cond)); out = k_s * GroupNorm(h) + k_b.
// cond is [N, embed_dim]; proj_w/proj_b realize the affine embed_dim -> 2C.
Tensor adagn(const Tensor& h, const Tensor& cond, const Tensor& proj_w,
             const Tensor& proj_b, int groups, Tape* tape = nullptr);

// U-Net denoiser over channel-concatenated [x || y_t]. ts/class_rows give the
// per-sample timestep and class-table row (kNullClass for the label-free path).
Tensor denoiser_forward_batch(const DenoiserModel& model, const Tensor& x, const Tensor& y_t,
                              const std::vector<int>& ts, const std::vector<int>& class_rows,
                              int T, Tape* tape = nullptr);

// Single-(t,k) convenience wrapper, broadcast over the batch.
Tensor denoiser_forward(const DenoiserModel& model, const Tensor& x, const Tensor& y_t,
                        int t, int class_row, int T, Tape* tape = nullptr);

// Downsampling branch + pooled head; returns log-probabilities [N, num_classes].
Tensor classifier_forward_batch(const ClassifierModel& model, const Tensor& y_t,
                                const std::vector<int>& ts, int T, Tape* tape = nullptr);

Tensor classifier_forward(const ClassifierModel& model, const Tensor& y_t, int t, int T,
                          Tape* tape = nullptr);

// d log p(k | y_t) / d y_t, evaluated at the supplied y_t (single sample).
Tensor classifier_grad(const ClassifierModel& model, const Tensor& y_t, int t, int k, int T);

// Checkpoint container: JSON manifest (config + name -> offset/shape) followed
// by the concatenated GI2I tensor blobs.
void save_checkpoint(const std::string& path, const std::string& kind,
                     const NetworkConfig& cfg, const ParamMap& params);
struct Checkpoint {
    std::string kind;
    NetworkConfig config;
    ParamMap params;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace gi2i
