#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "neurotune/matrix.hpp"

namespace neurotune {

// Joint audio-video encoder, desk scale. Pre-norm blocks:
//   x += attn(ln1(x)); x += mlp(ln2(x)); final layer norm at the top.
// Sequence layout: [CLS, video tokens..., audio tokens...].
struct ModelConfig {
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 64;
    int d_v = 0;         // video token feature width
    int d_a = 0;         // audio token feature width
    int max_tokens = 0;  // positional table size, CLS included

    void validate() const;
};

struct LayerParams {
    MatrixF64 ln1_gain, ln1_bias;          // 1 x d_model
    MatrixF64 w_q, w_k, w_v, w_o;          // d_model x d_model
    MatrixF64 b_q, b_k, b_v, b_o;          // 1 x d_model
    MatrixF64 ln2_gain, ln2_bias;          // 1 x d_model
    MatrixF64 w_ff1, b_ff1;                // d_model x d_ff, 1 x d_ff
    MatrixF64 w_ff2, b_ff2;                // d_ff x d_model, 1 x d_model
};

struct ModelState {
    ModelConfig cfg;
    MatrixF64 embed_v;     // d_v x d_model
    MatrixF64 embed_a;     // d_a x d_model
    MatrixF64 modality;    // 2 x d_model (row 0 video, row 1 audio)
    MatrixF64 positional;  // max_tokens x d_model
    MatrixF64 cls;         // 1 x d_model
    std::vector<LayerParams> layers;
    MatrixF64 final_ln_gain, final_ln_bias;  // 1 x d_model
};

// Weights ~ N(0, 1/fan_in); embeddings ~ N(0, 1/d_model); layer-norm gains 1,
// all biases 0. Deterministic in (cfg, seed).
ModelState init_model(const ModelConfig& cfg, std::uint64_t seed);
ModelState zeros_like(const ModelState& s);

// Visits every parameter tensor with a stable name; the single source of
// truth for optimizer updates, gradient checks and checkpoints.
void for_each_tensor(ModelState& s,
                     const std::function<void(const std::string&, MatrixF64&)>& fn);
void for_each_tensor(const ModelState& s,
                     const std::function<void(const std::string&, const MatrixF64&)>& fn);

struct TokenOutputs {
    MatrixF64 tokens;  // (1 + n_video + n_audio) x d_model, row 0 is CLS
    std::size_t n_video = 0;
    std::size_t n_audio = 0;

    std::size_t n_tokens() const { return n_video + n_audio; }
};

// Per-layer activations cached for the backward pass.
struct LayerTrace {
    MatrixF64 h1;                 // ln1 output
    MatrixF64 xhat1;              // ln1 normalized pre-gain
    std::vector<double> inv_std1;
    MatrixF64 q, k, v;
    std::vector<MatrixF64> attn_probs;  // per head, n_seq x n_seq
    MatrixF64 attn_concat;        // heads' outputs side by side, pre-projection
    MatrixF64 h2, xhat2;
    std::vector<double> inv_std2;
    MatrixF64 ff_pre;             // pre-activation, n_seq x d_ff
    MatrixF64 ff_act;             // post-activation
};

struct ForwardTrace {
    TokenOutputs out;
    MatrixF64 video_in, audio_in;  // raw token features, kept for embedding grads
    MatrixF64 x0;                  // embedded sequence
    std::vector<LayerTrace> layers;
    MatrixF64 xhat_final;
    std::vector<double> inv_std_final;
};

ForwardTrace forward_trace(const ModelState& s, const MatrixF64& video_window,
                           const MatrixF64& audio_window);
TokenOutputs forward(const ModelState& s, const MatrixF64& video_window,
                     const MatrixF64& audio_window);

// Mean over output token rows, CLS excluded.
std::vector<double> mean_pool(const TokenOutputs& out);

struct InputGrads {
    MatrixF64 d_video;  // n_video x d_v
    MatrixF64 d_audio;  // n_audio x d_a
};

// Exact reverse-mode gradients for every parameter given d(loss)/d(tokens);
// upstream has the same shape as out.tokens. Returns a ModelState-shaped
// gradient container; optionally fills gradients w.r.t. the raw inputs.
ModelState backward(const ModelState& s, const ForwardTrace& trace, const MatrixF64& upstream,
                    InputGrads* input_grads = nullptr);

// ---- Adam -------------------------------------------------------------------

struct AdamMoments {
    std::vector<MatrixF64> m, v;  // aligned with the tensor list they update
};

// Bias-corrected Adam over an explicit tensor list; t is 1-based.
void adam_step_tensors(const std::vector<MatrixF64*>& params,
                       const std::vector<const MatrixF64*>& grads, AdamMoments& opt, double lr,
                       double beta1, double beta2, double eps, long t);

// Convenience wrapper updating a whole model from a gradient model.
void adam_step(ModelState& s, const ModelState& grads, AdamMoments& opt, double lr, double beta1,
               double beta2, double eps, long t);

std::vector<MatrixF64*> tensor_ptrs(ModelState& s);
std::vector<const MatrixF64*> tensor_ptrs(const ModelState& s);
AdamMoments make_moments(const std::vector<MatrixF64*>& params);

// ---- checkpoints ------------------------------------------------------------
// Directory of one matrix file per tensor plus config.json; round-trips
// bit-exactly.
void save_checkpoint(const ModelState& s, const std::filesystem::path& dir);
ModelState load_checkpoint(const std::filesystem::path& dir);

}  // namespace neurotune
