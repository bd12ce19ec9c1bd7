#include "neurotune/braintune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neurotune/error.hpp"
#include "neurotune/numeric.hpp"
#include "neurotune/parallel.hpp"
#include "neurotune/rng.hpp"

namespace neurotune {

void TuneConfig::validate() const {
    if (epochs < 1) throw ConfigError("TuneConfig: epochs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("TuneConfig: bad learning rate");
    if (batch_size < 1) throw ConfigError("TuneConfig: batch_size must be >= 1");
    if (window_trs == 0) throw ConfigError("TuneConfig: window_trs must be >= 1");
    if (!(mask_fraction > 0.0 && mask_fraction < 1.0))
        throw ConfigError("TuneConfig: mask_fraction must lie in (0, 1)");
    if (jobs < 1) throw ConfigError("TuneConfig: jobs must be >= 1");
}

ProjectionHead init_head(std::size_t m, int d_model, bool has_bias, std::uint64_t seed) {
    if (m == 0) throw ValidationError("init_head: zero output voxels");
    Rng rng(mix_seed(seed, 0x68656164ULL));
    ProjectionHead h;
    h.w = MatrixF64(m, static_cast<std::size_t>(d_model));
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (double& x : h.w.data) x = sd * rng.next_normal();
    h.bias = MatrixF64(1, m, 0.0);
    h.has_bias = has_bias;
    return h;
}

VoxelMask filter_voxels(std::span<const double> ceilings, const RoiAtlas& atlas,
                        const std::vector<std::string>& target_rois, double threshold) {
    atlas.validate();
    if (ceilings.size() != atlas.n_voxels())
        throw ValidationError("filter_voxels: ceiling length != voxel count");
    if (target_rois.empty()) throw ValidationError("filter_voxels: no target ROIs");
    const VoxelMask roi_mask = mask_for_rois(atlas, target_rois);
    VoxelMask out;
    out.selected.assign(ceilings.size(), 0);
    for (std::size_t v = 0; v < ceilings.size(); ++v)
        out.selected[v] = (roi_mask.selected[v] && ceilings[v] > threshold) ? 1 : 0;
    if (out.count() == 0)
        throw UntunableSubjectError(
            "filter_voxels: no voxels above ceiling threshold " + std::to_string(threshold) +
            " in the target ROIs; subject cannot be tuned");
    return out;
}

LossGrads brain_tune_loss(const ModelState& s, const ProjectionHead& head,
                          const PairedSample& sample) {
    if (sample.y.empty()) throw ValidationError("brain_tune_loss: sample has no target vector");
    const std::size_t m = sample.y.size();
    if (head.w.rows != m || head.w.cols != static_cast<std::size_t>(s.cfg.d_model))
        throw ValidationError("brain_tune_loss: head shape mismatch");

    ForwardTrace trace = forward_trace(s, sample.video_window, sample.audio_window);
    const std::vector<double> pooled = mean_pool(trace.out);
    const std::size_t d = pooled.size();

    LossGrads out;
    out.head_grads.dw = MatrixF64(m, d, 0.0);
    out.head_grads.dbias = MatrixF64(1, m, 0.0);

    // y_hat = W pooled + b; loss = sum_i (y_hat_i - y_i)^2
    std::vector<double> d_pool(d, 0.0);
    NeumaierAcc loss;
    for (std::size_t i = 0; i < m; ++i) {
        const double* wr = head.w.data.data() + i * d;
        double yh = head.has_bias ? head.bias.data[i] : 0.0;
        for (std::size_t j = 0; j < d; ++j) yh += wr[j] * pooled[j];
        const double r = yh - sample.y[i];
        loss.add(r * r);
        const double dr = 2.0 * r;
        double* dwr = out.head_grads.dw.data.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            dwr[j] = dr * pooled[j];
            d_pool[j] += dr * wr[j];
        }
        if (head.has_bias) out.head_grads.dbias.data[i] = dr;
    }
    out.loss = loss.value();
    if (!std::isfinite(out.loss)) throw NumericalError("brain_tune_loss: non-finite loss");

    // Pooling spreads the gradient uniformly over non-CLS rows.
    const std::size_t n = trace.out.n_tokens();
    MatrixF64 upstream(trace.out.tokens.rows, d, 0.0);
    for (std::size_t i = 1; i < upstream.rows; ++i)
        for (std::size_t j = 0; j < d; ++j)
            upstream.at(i, j) = d_pool[j] / static_cast<double>(n);
    out.model_grads = backward(s, trace, upstream);
    return out;
}

namespace {

struct ParamBundle {
    std::vector<MatrixF64*> params;
    AdamMoments moments;
};

// Shared epoch/batch loop for both objectives. sample_loss(sample_idx, epoch)
// must return per-sample loss and accumulate gradients into grad tensors that
// mirror `params` (provided per call through the closure).
template <class LossFn>
std::vector<double> run_epochs(std::size_t n_samples, const TuneConfig& cfg,
                               const std::vector<MatrixF64*>& params,
                               const std::vector<MatrixF64*>& grad_slots, LossFn&& sample_loss) {
    AdamMoments moments = make_moments(params);
    std::vector<const MatrixF64*> grads_view(grad_slots.begin(), grad_slots.end());
    std::vector<double> trace;
    trace.reserve(cfg.epochs);
    long t = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n_samples);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(cfg.seed + static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        NeumaierAcc epoch_loss;
        for (std::size_t begin = 0; begin < n_samples; begin += cfg.batch_size) {
            const std::size_t end = std::min(n_samples, begin + cfg.batch_size);
            for (auto* g : grad_slots) std::fill(g->data.begin(), g->data.end(), 0.0);
            for (std::size_t i = begin; i < end; ++i) {
                const double loss = sample_loss(order[i], epoch);
                if (!std::isfinite(loss))
                    throw NumericalError("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch starting " +
                                         std::to_string(begin));
                epoch_loss.add(loss);
            }
            const double inv_n = 1.0 / static_cast<double>(end - begin);
            for (auto* g : grad_slots) scale_inplace(*g, inv_n);
            adam_step_tensors(params, grads_view, moments, cfg.lr, cfg.adam_beta1,
                              cfg.adam_beta2, cfg.adam_eps, ++t);
        }
        trace.push_back(epoch_loss.value() / static_cast<double>(n_samples));
    }
    return trace;
}

void accumulate_model_grads(ModelState& into, const ModelState& add) {
    auto dst = tensor_ptrs(into);
    auto src = tensor_ptrs(add);
    for (std::size_t i = 0; i < dst.size(); ++i) add_inplace(*dst[i], *src[i]);
}

}  // namespace

TrainResult train(const std::vector<PairedSample>& dataset, const TuneConfig& cfg,
                  const ModelState& init) {
    cfg.validate();
    if (dataset.empty()) throw ValidationError("train: empty dataset");
    const std::size_t m = dataset[0].y.size();
    if (m == 0) throw ValidationError("train: samples carry no target vector");
    for (const auto& s : dataset)
        if (s.y.size() != m) throw ValidationError("train: inconsistent target lengths");

    TrainResult res;
    res.state = init;
    res.head = init_head(m, init.cfg.d_model, cfg.head_bias, cfg.seed);

    // Parameter list: transformer tensors first, then head. When the
    // transformer is frozen only the head tensors are updated.
    std::vector<MatrixF64*> params;
    if (!cfg.freeze_transformer)
        for (auto* p : tensor_ptrs(res.state)) params.push_back(p);
    params.push_back(&res.head.w);
    if (res.head.has_bias) params.push_back(&res.head.bias);

    ModelState grad_model = zeros_like(init);
    MatrixF64 grad_w(m, static_cast<std::size_t>(init.cfg.d_model), 0.0);
    MatrixF64 grad_b(1, m, 0.0);
    std::vector<MatrixF64*> grad_slots;
    if (!cfg.freeze_transformer)
        for (auto* g : tensor_ptrs(grad_model)) grad_slots.push_back(g);
    grad_slots.push_back(&grad_w);
    if (res.head.has_bias) grad_slots.push_back(&grad_b);

    res.epoch_mean_loss = run_epochs(
        dataset.size(), cfg, params, grad_slots, [&](std::size_t idx, int) {
            LossGrads lg = brain_tune_loss(res.state, res.head, dataset[idx]);
            if (!cfg.freeze_transformer) accumulate_model_grads(grad_model, lg.model_grads);
            add_inplace(grad_w, lg.head_grads.dw);
            if (res.head.has_bias) add_inplace(grad_b, lg.head_grads.dbias);
            return lg.loss;
        });
    return res;
}

StimulusTuneResult stimulus_tune(const std::vector<PairedSample>& windows, const TuneConfig& cfg,
                                 const ModelState& init) {
    TuneConfig scfg = cfg;
    scfg.objective = TuneObjective::stimulus;
    scfg.validate();
    if (windows.empty()) throw ValidationError("stimulus_tune: empty dataset");

    const auto d = static_cast<std::size_t>(init.cfg.d_model);
    const auto dv = static_cast<std::size_t>(init.cfg.d_v);
    const auto da = static_cast<std::size_t>(init.cfg.d_a);

    StimulusTuneResult res;
    res.state = init;

    // Learned mask embeddings (input feature space) and linear decoders.
    Rng aux_rng(mix_seed(cfg.seed, 0x7374696dULL));
    MatrixF64 mask_v(1, dv), mask_a(1, da);
    for (double& x : mask_v.data) x = aux_rng.next_normal() / std::sqrt(double(dv));
    for (double& x : mask_a.data) x = aux_rng.next_normal() / std::sqrt(double(da));
    MatrixF64 dec_v(d, dv), dec_a(d, da);
    for (double& x : dec_v.data) x = aux_rng.next_normal() / std::sqrt(double(d));
    for (double& x : dec_a.data) x = aux_rng.next_normal() / std::sqrt(double(d));
    MatrixF64 dec_v_b(1, dv, 0.0), dec_a_b(1, da, 0.0);

    std::vector<MatrixF64*> params = tensor_ptrs(res.state);
    params.insert(params.end(), {&mask_v, &mask_a, &dec_v, &dec_a, &dec_v_b, &dec_a_b});

    ModelState grad_model = zeros_like(init);
    MatrixF64 g_mask_v(1, dv, 0.0), g_mask_a(1, da, 0.0);
    MatrixF64 g_dec_v(d, dv, 0.0), g_dec_a(d, da, 0.0);
    MatrixF64 g_dec_v_b(1, dv, 0.0), g_dec_a_b(1, da, 0.0);
    std::vector<MatrixF64*> grad_slots = tensor_ptrs(grad_model);
    grad_slots.insert(grad_slots.end(),
                      {&g_mask_v, &g_mask_a, &g_dec_v, &g_dec_a, &g_dec_v_b, &g_dec_a_b});

    res.epoch_mean_loss = run_epochs(
        windows.size(), scfg, params, grad_slots, [&](std::size_t idx, int epoch) {
            const PairedSample& w = windows[idx];
            const std::size_t n_v = w.video_window.rows, n_a = w.audio_window.rows;
            const std::size_t n_tok = n_v + n_a;

            // Seeded mask choice per (epoch, sample): k distinct tokens.
            Rng mask_rng(mix_seed(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (idx + 1)),
                                  static_cast<std::uint64_t>(epoch) + 0x6d61736bULL));
            std::size_t k = static_cast<std::size_t>(
                std::floor(scfg.mask_fraction * static_cast<double>(n_tok) + 0.5));
            k = std::max<std::size_t>(1, std::min(k, n_tok - 1));
            std::vector<std::size_t> all(n_tok);
            std::iota(all.begin(), all.end(), 0);
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(mask_rng.next_below(n_tok - i));
                std::swap(all[i], all[j]);
            }
            std::vector<std::size_t> masked(all.begin(), all.begin() + k);
            std::sort(masked.begin(), masked.end());

            MatrixF64 vin = w.video_window, ain = w.audio_window;
            for (std::size_t tok : masked) {
                if (tok < n_v)
                    std::copy(mask_v.data.begin(), mask_v.data.end(),
                              vin.data.begin() + tok * dv);
                else
                    std::copy(mask_a.data.begin(), mask_a.data.end(),
                              ain.data.begin() + (tok - n_v) * da);
            }

            ForwardTrace trace = forward_trace(res.state, vin, ain);

            // Decode masked tokens and form MSE over their features.
            const std::size_t denom_v = dv, denom_a = da;
            std::size_t n_feat = 0;
            for (std::size_t tok : masked) n_feat += (tok < n_v) ? denom_v : denom_a;
            MatrixF64 upstream(trace.out.tokens.rows, d, 0.0);
            NeumaierAcc loss;
            const double inv_feat = 1.0 / static_cast<double>(n_feat);
            for (std::size_t tok : masked) {
                const std::size_t row = 1 + tok;  // CLS offset
                const double* h = trace.out.tokens.data.data() + row * d;
                const bool is_video = tok < n_v;
                const MatrixF64& dec = is_video ? dec_v : dec_a;
                const MatrixF64& dec_b = is_video ? dec_v_b : dec_a_b;
                MatrixF64& g_dec = is_video ? g_dec_v : g_dec_a;
                MatrixF64& g_dec_bias = is_video ? g_dec_v_b : g_dec_a_b;
                const std::size_t width = is_video ? dv : da;
                const double* target = is_video
                                           ? w.video_window.data.data() + tok * dv
                                           : w.audio_window.data.data() + (tok - n_v) * da;
                double* up = upstream.data.data() + row * d;
                for (std::size_t f = 0; f < width; ++f) {
                    double rec = dec_b.data[f];
                    for (std::size_t j = 0; j < d; ++j) rec += h[j] * dec.at(j, f);
                    const double r = rec - target[f];
                    loss.add(r * r * inv_feat);
                    const double dr = 2.0 * r * inv_feat;
                    for (std::size_t j = 0; j < d; ++j) {
                        g_dec.at(j, f) += dr * h[j];
                        up[j] += dr * dec.at(j, f);
                    }
                    g_dec_bias.data[f] += dr;
                }
            }

            InputGrads in_grads;
            ModelState mg = backward(res.state, trace, upstream, &in_grads);
            accumulate_model_grads(grad_model, mg);
            // Masked positions fed the learned embedding, so their input
            // gradients flow to it.
            for (std::size_t tok : masked) {
                if (tok < n_v)
                    for (std::size_t f = 0; f < dv; ++f)
                        g_mask_v.data[f] += in_grads.d_video.at(tok, f);
                else
                    for (std::size_t f = 0; f < da; ++f)
                        g_mask_a.data[f] += in_grads.d_audio.at(tok - n_v, f);
            }
            return loss.value();
        });
    return res;
}

}  // namespace neurotune
