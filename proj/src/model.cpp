#include "neurotune/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "neurotune/error.hpp"
#include "neurotune/rng.hpp"

namespace neurotune {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// y = gain .* (x - mu) / sqrt(var + eps) + bias, row-wise.
void layer_norm(const MatrixF64& x, const MatrixF64& gain, const MatrixF64& bias, MatrixF64& y,
                MatrixF64& xhat, std::vector<double>& inv_std) {
    const std::size_t n = x.rows, d = x.cols;
    y = MatrixF64(n, d);
    xhat = MatrixF64(n, d);
    inv_std.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = x.data.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[i] = is;
        double* hr = xhat.data.data() + i * d;
        double* yr = y.data.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            hr[j] = (xr[j] - mu) * is;
            yr[j] = gain.data[j] * hr[j] + bias.data[j];
        }
    }
}

// Given dy, produces dx and accumulates gain/bias grads.
MatrixF64 layer_norm_backward(const MatrixF64& dy, const MatrixF64& xhat,
                              const std::vector<double>& inv_std, const MatrixF64& gain,
                              MatrixF64& dgain, MatrixF64& dbias) {
    const std::size_t n = dy.rows, d = dy.cols;
    MatrixF64 dx(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* dyr = dy.data.data() + i * d;
        const double* hr = xhat.data.data() + i * d;
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dh = dyr[j] * gain.data[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
            dgain.data[j] += dyr[j] * hr[j];
            dbias.data[j] += dyr[j];
        }
        const double s = inv_std[i] / static_cast<double>(d);
        double* dxr = dx.data.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            const double dh = dyr[j] * gain.data[j];
            dxr[j] = s * (static_cast<double>(d) * dh - sum_dh - hr[j] * sum_dh_h);
        }
    }
    return dx;
}

void add_row_bias(MatrixF64& x, const MatrixF64& bias) {
    for (std::size_t i = 0; i < x.rows; ++i) {
        double* xr = x.data.data() + i * x.cols;
        for (std::size_t j = 0; j < x.cols; ++j) xr[j] += bias.data[j];
    }
}

void accumulate_colsum(const MatrixF64& x, MatrixF64& out) {
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out.data[j] += x.at(i, j);
}

MatrixF64 gaussian(std::size_t r, std::size_t c, double sd, Rng& rng) {
    MatrixF64 m(r, c);
    for (double& x : m.data) x = sd * rng.next_normal();
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
        throw ConfigError("ModelConfig: transformer dimensions must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("ModelConfig: d_model % n_heads != 0");
    if (d_v < 1 || d_a < 1) throw ConfigError("ModelConfig: token feature widths must be >= 1");
    if (max_tokens < 2) throw ConfigError("ModelConfig: max_tokens must cover CLS plus tokens");
}

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const double sd_model = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

    ModelState s;
    s.cfg = cfg;
    s.embed_v = gaussian(cfg.d_v, d, 1.0 / std::sqrt(static_cast<double>(cfg.d_v)), rng);
    s.embed_a = gaussian(cfg.d_a, d, 1.0 / std::sqrt(static_cast<double>(cfg.d_a)), rng);
    s.modality = gaussian(2, d, sd_model, rng);
    s.positional = gaussian(cfg.max_tokens, d, sd_model, rng);
    s.cls = gaussian(1, d, sd_model, rng);
    s.layers.resize(cfg.n_layers);
    for (auto& l : s.layers) {
        l.ln1_gain = MatrixF64(1, d, 1.0);
        l.ln1_bias = MatrixF64(1, d, 0.0);
        l.w_q = gaussian(d, d, sd_model, rng);
        l.w_k = gaussian(d, d, sd_model, rng);
        l.w_v = gaussian(d, d, sd_model, rng);
        l.w_o = gaussian(d, d, sd_model, rng);
        l.b_q = MatrixF64(1, d, 0.0);
        l.b_k = MatrixF64(1, d, 0.0);
        l.b_v = MatrixF64(1, d, 0.0);
        l.b_o = MatrixF64(1, d, 0.0);
        l.ln2_gain = MatrixF64(1, d, 1.0);
        l.ln2_bias = MatrixF64(1, d, 0.0);
        l.w_ff1 = gaussian(d, cfg.d_ff, sd_model, rng);
        l.b_ff1 = MatrixF64(1, cfg.d_ff, 0.0);
        l.w_ff2 = gaussian(cfg.d_ff, d, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)), rng);
        l.b_ff2 = MatrixF64(1, d, 0.0);
    }
    s.final_ln_gain = MatrixF64(1, d, 1.0);
    s.final_ln_bias = MatrixF64(1, d, 0.0);
    return s;
}

ModelState zeros_like(const ModelState& s) {
    ModelState z = s;
    for_each_tensor(z, [](const std::string&, MatrixF64& t) {
        std::fill(t.data.begin(), t.data.end(), 0.0);
    });
    return z;
}

namespace {

template <class State, class Fn>
void visit_tensors(State& s, Fn&& fn) {
    fn("embed_v", s.embed_v);
    fn("embed_a", s.embed_a);
    fn("modality", s.modality);
    fn("positional", s.positional);
    fn("cls", s.cls);
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
        auto& l = s.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        fn(p + "ln1_gain", l.ln1_gain);
        fn(p + "ln1_bias", l.ln1_bias);
        fn(p + "w_q", l.w_q);
        fn(p + "b_q", l.b_q);
        fn(p + "w_k", l.w_k);
        fn(p + "b_k", l.b_k);
        fn(p + "w_v", l.w_v);
        fn(p + "b_v", l.b_v);
        fn(p + "w_o", l.w_o);
        fn(p + "b_o", l.b_o);
        fn(p + "ln2_gain", l.ln2_gain);
        fn(p + "ln2_bias", l.ln2_bias);
        fn(p + "w_ff1", l.w_ff1);
        fn(p + "b_ff1", l.b_ff1);
        fn(p + "w_ff2", l.w_ff2);
        fn(p + "b_ff2", l.b_ff2);
    }
    fn("final_ln_gain", s.final_ln_gain);
    fn("final_ln_bias", s.final_ln_bias);
}

}  // namespace

void for_each_tensor(ModelState& s,
                     const std::function<void(const std::string&, MatrixF64&)>& fn) {
    visit_tensors(s, fn);
}

void for_each_tensor(const ModelState& s,
                     const std::function<void(const std::string&, const MatrixF64&)>& fn) {
    visit_tensors(s, fn);
}

ForwardTrace forward_trace(const ModelState& s, const MatrixF64& video_window,
                           const MatrixF64& audio_window) {
    s.cfg.validate();
    require_nonempty(video_window, "forward: video_window");
    require_nonempty(audio_window, "forward: audio_window");
    if (video_window.cols != static_cast<std::size_t>(s.cfg.d_v))
        throw ValidationError("forward: video token width != d_v");
    if (audio_window.cols != static_cast<std::size_t>(s.cfg.d_a))
        throw ValidationError("forward: audio token width != d_a");
    const std::size_t n_v = video_window.rows, n_a = audio_window.rows;
    const std::size_t n_seq = 1 + n_v + n_a;
    if (n_seq > static_cast<std::size_t>(s.cfg.max_tokens))
        throw ValidationError("forward: sequence exceeds max_tokens");
    const auto d = static_cast<std::size_t>(s.cfg.d_model);
    const auto heads = static_cast<std::size_t>(s.cfg.n_heads);
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardTrace tr;
    tr.video_in = video_window;
    tr.audio_in = audio_window;

    // Embedding: content projection + modality + position; CLS is its own row.
    MatrixF64 x(n_seq, d);
    {
        const MatrixF64 ve = matmul(video_window, s.embed_v);
        const MatrixF64 ae = matmul(audio_window, s.embed_a);
        for (std::size_t j = 0; j < d; ++j) x.at(0, j) = s.cls.data[j] + s.positional.at(0, j);
        for (std::size_t i = 0; i < n_v; ++i)
            for (std::size_t j = 0; j < d; ++j)
                x.at(1 + i, j) = ve.at(i, j) + s.modality.at(0, j) + s.positional.at(1 + i, j);
        for (std::size_t i = 0; i < n_a; ++i)
            for (std::size_t j = 0; j < d; ++j)
                x.at(1 + n_v + i, j) =
                    ae.at(i, j) + s.modality.at(1, j) + s.positional.at(1 + n_v + i, j);
    }
    tr.x0 = x;

    tr.layers.resize(s.layers.size());
    for (std::size_t li = 0; li < s.layers.size(); ++li) {
        const auto& l = s.layers[li];
        auto& lt = tr.layers[li];

        layer_norm(x, l.ln1_gain, l.ln1_bias, lt.h1, lt.xhat1, lt.inv_std1);
        lt.q = matmul(lt.h1, l.w_q);
        add_row_bias(lt.q, l.b_q);
        lt.k = matmul(lt.h1, l.w_k);
        add_row_bias(lt.k, l.b_k);
        lt.v = matmul(lt.h1, l.w_v);
        add_row_bias(lt.v, l.b_v);

        lt.attn_probs.assign(heads, MatrixF64(n_seq, n_seq));
        lt.attn_concat = MatrixF64(n_seq, d);
        for (std::size_t h = 0; h < heads; ++h) {
            MatrixF64& probs = lt.attn_probs[h];
            for (std::size_t i = 0; i < n_seq; ++i) {
                const double* qi = lt.q.data.data() + i * d + h * dh;
                double* pr = probs.data.data() + i * n_seq;
                double mx = -1e300;
                for (std::size_t j = 0; j < n_seq; ++j) {
                    const double* kj = lt.k.data.data() + j * d + h * dh;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    pr[j] = dot * scale;
                    mx = std::max(mx, pr[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < n_seq; ++j) {
                    pr[j] = std::exp(pr[j] - mx);
                    z += pr[j];
                }
                const double inv_z = 1.0 / z;
                double* out = lt.attn_concat.data.data() + i * d + h * dh;
                for (std::size_t j = 0; j < n_seq; ++j) {
                    pr[j] *= inv_z;
                    const double* vj = lt.v.data.data() + j * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) out[c] += pr[j] * vj[c];
                }
            }
        }

        MatrixF64 proj = matmul(lt.attn_concat, l.w_o);
        add_row_bias(proj, l.b_o);
        add_inplace(x, proj);

        layer_norm(x, l.ln2_gain, l.ln2_bias, lt.h2, lt.xhat2, lt.inv_std2);
        lt.ff_pre = matmul(lt.h2, l.w_ff1);
        add_row_bias(lt.ff_pre, l.b_ff1);
        lt.ff_act = lt.ff_pre;
        for (double& u : lt.ff_act.data) u = gelu(u);
        MatrixF64 ff_out = matmul(lt.ff_act, l.w_ff2);
        add_row_bias(ff_out, l.b_ff2);
        add_inplace(x, ff_out);
    }

    MatrixF64 y;
    layer_norm(x, s.final_ln_gain, s.final_ln_bias, y, tr.xhat_final, tr.inv_std_final);
    tr.out.tokens = std::move(y);
    tr.out.n_video = n_v;
    tr.out.n_audio = n_a;
    return tr;
}

TokenOutputs forward(const ModelState& s, const MatrixF64& video_window,
                     const MatrixF64& audio_window) {
    return forward_trace(s, video_window, audio_window).out;
}

std::vector<double> mean_pool(const TokenOutputs& out) {
    const std::size_t n = out.n_tokens();
    if (n == 0) throw ValidationError("mean_pool: no non-CLS tokens");
    const std::size_t d = out.tokens.cols;
    std::vector<double> pooled(d, 0.0);
    for (std::size_t i = 1; i < out.tokens.rows; ++i) {
        const double* r = out.tokens.data.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) pooled[j] += r[j];
    }
    for (double& x : pooled) x /= static_cast<double>(n);
    return pooled;
}

ModelState backward(const ModelState& s, const ForwardTrace& trace, const MatrixF64& upstream,
                    InputGrads* input_grads) {
    if (!upstream.same_shape(trace.out.tokens))
        throw ValidationError("backward: upstream shape != token outputs");
    const auto d = static_cast<std::size_t>(s.cfg.d_model);
    const auto heads = static_cast<std::size_t>(s.cfg.n_heads);
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t n_seq = upstream.rows;
    const std::size_t n_v = trace.out.n_video, n_a = trace.out.n_audio;

    ModelState g = zeros_like(s);

    MatrixF64 dx = layer_norm_backward(upstream, trace.xhat_final, trace.inv_std_final,
                                       s.final_ln_gain, g.final_ln_gain, g.final_ln_bias);

    for (std::size_t li = s.layers.size(); li-- > 0;) {
        const auto& l = s.layers[li];
        const auto& lt = trace.layers[li];
        auto& gl = g.layers[li];

        // x_out = x_mid + W2(gelu(W1 h2 + b1)) + b2
        MatrixF64 d_ff_out = dx;  // residual branch
        MatrixF64 d_act = matmul_nt(d_ff_out, l.w_ff2);
        add_inplace(gl.w_ff2, matmul_tn(lt.ff_act, d_ff_out));
        accumulate_colsum(d_ff_out, gl.b_ff2);
        MatrixF64 d_pre = d_act;
        for (std::size_t i = 0; i < d_pre.size(); ++i)
            d_pre.data[i] *= gelu_grad(lt.ff_pre.data[i]);
        MatrixF64 d_h2 = matmul_nt(d_pre, l.w_ff1);
        add_inplace(gl.w_ff1, matmul_tn(lt.h2, d_pre));
        accumulate_colsum(d_pre, gl.b_ff1);
        add_inplace(dx, layer_norm_backward(d_h2, lt.xhat2, lt.inv_std2, l.ln2_gain,
                                            gl.ln2_gain, gl.ln2_bias));

        // x_mid = x_in + W_o(concat heads) + b_o
        MatrixF64 d_proj = dx;  // residual branch
        MatrixF64 d_concat = matmul_nt(d_proj, l.w_o);
        add_inplace(gl.w_o, matmul_tn(lt.attn_concat, d_proj));
        accumulate_colsum(d_proj, gl.b_o);

        MatrixF64 dq(n_seq, d, 0.0), dk(n_seq, d, 0.0), dv(n_seq, d, 0.0);
        std::vector<double> dp(n_seq);
        for (std::size_t h = 0; h < heads; ++h) {
            const MatrixF64& probs = lt.attn_probs[h];
            for (std::size_t i = 0; i < n_seq; ++i) {
                const double* doh = d_concat.data.data() + i * d + h * dh;
                const double* pr = probs.data.data() + i * n_seq;
                // dP = dO V^T; dV += P^T dO
                double dp_dot_p = 0.0;
                for (std::size_t j = 0; j < n_seq; ++j) {
                    const double* vj = lt.v.data.data() + j * d + h * dh;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += doh[c] * vj[c];
                    dp[j] = acc;
                    dp_dot_p += acc * pr[j];
                    double* dvj = dv.data.data() + j * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) dvj[c] += pr[j] * doh[c];
                }
                // softmax backward, then the 1/sqrt(dh) score scale
                const double* qi = lt.q.data.data() + i * d + h * dh;
                double* dqi = dq.data.data() + i * d + h * dh;
                for (std::size_t j = 0; j < n_seq; ++j) {
                    const double ds = (dp[j] - dp_dot_p) * pr[j] * scale;
                    const double* kj = lt.k.data.data() + j * d + h * dh;
                    double* dkj = dk.data.data() + j * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        MatrixF64 d_h1 = matmul_nt(dq, l.w_q);
        add_inplace(d_h1, matmul_nt(dk, l.w_k));
        add_inplace(d_h1, matmul_nt(dv, l.w_v));
        add_inplace(gl.w_q, matmul_tn(lt.h1, dq));
        add_inplace(gl.w_k, matmul_tn(lt.h1, dk));
        add_inplace(gl.w_v, matmul_tn(lt.h1, dv));
        accumulate_colsum(dq, gl.b_q);
        accumulate_colsum(dk, gl.b_k);
        accumulate_colsum(dv, gl.b_v);
        add_inplace(dx, layer_norm_backward(d_h1, lt.xhat1, lt.inv_std1, l.ln1_gain,
                                            gl.ln1_gain, gl.ln1_bias));
    }

    // Embedding layer.
    for (std::size_t j = 0; j < d; ++j) {
        g.cls.data[j] += dx.at(0, j);
        g.positional.at(0, j) += dx.at(0, j);
    }
    for (std::size_t i = 0; i < n_v; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            g.modality.at(0, j) += dx.at(1 + i, j);
            g.positional.at(1 + i, j) += dx.at(1 + i, j);
        }
    for (std::size_t i = 0; i < n_a; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            g.modality.at(1, j) += dx.at(1 + n_v + i, j);
            g.positional.at(1 + n_v + i, j) += dx.at(1 + n_v + i, j);
        }
    MatrixF64 dx_v(n_v, d), dx_a(n_a, d);
    for (std::size_t i = 0; i < n_v; ++i)
        for (std::size_t j = 0; j < d; ++j) dx_v.at(i, j) = dx.at(1 + i, j);
    for (std::size_t i = 0; i < n_a; ++i)
        for (std::size_t j = 0; j < d; ++j) dx_a.at(i, j) = dx.at(1 + n_v + i, j);
    add_inplace(g.embed_v, matmul_tn(trace.video_in, dx_v));
    add_inplace(g.embed_a, matmul_tn(trace.audio_in, dx_a));
    if (input_grads) {
        input_grads->d_video = matmul_nt(dx_v, s.embed_v);
        input_grads->d_audio = matmul_nt(dx_a, s.embed_a);
    }
    return g;
}

// ---- Adam -------------------------------------------------------------------

std::vector<MatrixF64*> tensor_ptrs(ModelState& s) {
    std::vector<MatrixF64*> out;
    for_each_tensor(s, [&](const std::string&, MatrixF64& t) { out.push_back(&t); });
    return out;
}

std::vector<const MatrixF64*> tensor_ptrs(const ModelState& s) {
    std::vector<const MatrixF64*> out;
    for_each_tensor(s, [&](const std::string&, const MatrixF64& t) { out.push_back(&t); });
    return out;
}

AdamMoments make_moments(const std::vector<MatrixF64*>& params) {
    AdamMoments o;
    o.m.reserve(params.size());
    o.v.reserve(params.size());
    for (const auto* p : params) {
        o.m.emplace_back(p->rows, p->cols, 0.0);
        o.v.emplace_back(p->rows, p->cols, 0.0);
    }
    return o;
}

void adam_step_tensors(const std::vector<MatrixF64*>& params,
                       const std::vector<const MatrixF64*>& grads, AdamMoments& opt, double lr,
                       double beta1, double beta2, double eps, long t) {
    if (params.size() != grads.size() || params.size() != opt.m.size())
        throw ValidationError("adam_step: tensor list mismatch");
    if (t < 1) throw ValidationError("adam_step: t is 1-based");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        MatrixF64& p = *params[i];
        const MatrixF64& gr = *grads[i];
        if (!p.same_shape(gr)) throw ValidationError("adam_step: gradient shape mismatch");
        MatrixF64& m = opt.m[i];
        MatrixF64& v = opt.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gr.data[k];
            v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gr.data[k] * gr.data[k];
            const double mhat = m.data[k] / bc1;
            const double vhat = v.data[k] / bc2;
            p.data[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void adam_step(ModelState& s, const ModelState& grads, AdamMoments& opt, double lr, double beta1,
               double beta2, double eps, long t) {
    auto params = tensor_ptrs(s);
    auto gs = tensor_ptrs(grads);
    adam_step_tensors(params, gs, opt, lr, beta1, beta2, eps, t);
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const ModelState& s, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("save_checkpoint: cannot create " + dir.string());
    nlohmann::json j;
    j["d_model"] = s.cfg.d_model;
    j["n_layers"] = s.cfg.n_layers;
    j["n_heads"] = s.cfg.n_heads;
    j["d_ff"] = s.cfg.d_ff;
    j["d_v"] = s.cfg.d_v;
    j["d_a"] = s.cfg.d_a;
    j["max_tokens"] = s.cfg.max_tokens;
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot write config.json in " + dir.string());
    out << j.dump(2) << '\n';
    for_each_tensor(s, [&](const std::string& name, const MatrixF64& t) {
        write_matrix(t, dir / (name + ".mmbt"));
    });
}

ModelState load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "config.json");
    if (!in) throw IoError("load_checkpoint: cannot open config.json in " + dir.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_checkpoint: malformed config.json: " + std::string(e.what()));
    }
    ModelConfig cfg;
    try {
        cfg.d_model = j.at("d_model").get<int>();
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.d_ff = j.at("d_ff").get<int>();
        cfg.d_v = j.at("d_v").get<int>();
        cfg.d_a = j.at("d_a").get<int>();
        cfg.max_tokens = j.at("max_tokens").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("load_checkpoint: bad config.json: " + std::string(e.what()));
    }
    ModelState s = init_model(cfg, 0);
    for_each_tensor(s, [&](const std::string& name, MatrixF64& t) {
        MatrixF64 loaded = read_matrix(dir / (name + ".mmbt"));
        if (!loaded.same_shape(t))
            throw ValidationError("load_checkpoint: shape mismatch for tensor " + name);
        t = std::move(loaded);
    });
    return s;
}

}  // namespace neurotune
