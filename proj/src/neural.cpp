#include "lesionkit/neural.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace lesionkit {

namespace {

constexpr int kConvFilters[3] = {8, 16, 16};

double sigmoid(double x) {
    // Symmetric formulation avoids overflow on either tail.
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double glorot_limit(int fan_in, int fan_out) {
    return std::sqrt(6.0 / (fan_in + fan_out));
}

void fill_uniform(Tensor& t, double limit, Rng& rng) {
    for (auto& v : t.v) v = rng.uniform(-limit, limit);
}

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 1) throw ValidationError("tensor extents must be positive");
        n *= static_cast<std::size_t>(d);
    }
    v.assign(n, 0.0);
}

int MaskEncoderParams::flat_size() const {
    int side = crop_size / 8;
    return kConvFilters[2] * side * side;
}

MaskEncoderParams MaskEncoderParams::zeros(int crop_size, int feature_dim) {
    if (crop_size < 8 || (crop_size & (crop_size - 1)) != 0)
        throw ValidationError("mask_crop_size must be a power of two >= 8");
    MaskEncoderParams p;
    p.crop_size = crop_size;
    p.feature_dim = feature_dim;
    int in_ch = 1;
    for (int s = 0; s < 3; ++s) {
        ConvStage stage;
        stage.w = Tensor({kConvFilters[s], in_ch, 3, 3});
        stage.b = Tensor({kConvFilters[s]});
        p.stages.push_back(std::move(stage));
        in_ch = kConvFilters[s];
    }
    p.proj_w = Tensor({feature_dim, p.flat_size()});
    p.proj_b = Tensor({feature_dim});
    return p;
}

MaskEncoderParams MaskEncoderParams::init(int crop_size, int feature_dim, Rng& rng) {
    MaskEncoderParams p = zeros(crop_size, feature_dim);
    int in_ch = 1;
    for (int s = 0; s < 3; ++s) {
        fill_uniform(p.stages[s].w, glorot_limit(in_ch * 9, kConvFilters[s] * 9), rng);
        in_ch = kConvFilters[s];
    }
    fill_uniform(p.proj_w, glorot_limit(p.flat_size(), feature_dim), rng);
    return p;
}

std::vector<double> mask_encoder_forward(const MaskEncoderParams& p,
                                         const std::vector<double>& crop,
                                         MaskEncoderCache* cache) {
    int side = p.crop_size;
    if (crop.size() != static_cast<std::size_t>(side) * side)
        throw ValidationError("mask crop size does not match encoder");
    std::vector<double> cur = crop;
    int in_ch = 1;
    for (int s = 0; s < 3; ++s) {
        int out_ch = kConvFilters[s];
        const Tensor& w = p.stages[s].w;
        const Tensor& b = p.stages[s].b;
        std::vector<double> act(static_cast<std::size_t>(out_ch) * side * side);
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    double acc = b[static_cast<std::size_t>(oc)];
                    for (int ic = 0; ic < in_ch; ++ic)
                        for (int ky = 0; ky < 3; ++ky) {
                            int yy = y + ky - 1;
                            if (yy < 0 || yy >= side) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int xx = x + kx - 1;
                                if (xx < 0 || xx >= side) continue;
                                acc += w[((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + ky) * 3 + kx] *
                                       cur[(static_cast<std::size_t>(ic) * side + yy) * side + xx];
                            }
                        }
                    act[(static_cast<std::size_t>(oc) * side + y) * side + x] = std::tanh(acc);
                }
            }
        }
        int half = side / 2;
        std::vector<double> pooled(static_cast<std::size_t>(out_ch) * half * half);
        std::vector<int> argmax(pooled.size());
        for (int oc = 0; oc < out_ch; ++oc)
            for (int py = 0; py < half; ++py)
                for (int px = 0; px < half; ++px) {
                    int best = -1;
                    double best_v = 0.0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            int idx = (oc * side + (2 * py + dy)) * side + (2 * px + dx);
                            if (best < 0 || act[static_cast<std::size_t>(idx)] > best_v) {
                                best = idx;
                                best_v = act[static_cast<std::size_t>(idx)];
                            }
                        }
                    std::size_t pidx = (static_cast<std::size_t>(oc) * half + py) * half + px;
                    pooled[pidx] = best_v;
                    argmax[pidx] = best;
                }
        if (cache) {
            cache->stage_in.push_back(std::move(cur));
            cache->stage_act.push_back(std::move(act));
            cache->pool_argmax.push_back(std::move(argmax));
        }
        cur = std::move(pooled);
        side = half;
        in_ch = out_ch;
    }
    if (cache) cache->flat = cur;

    std::vector<double> out(static_cast<std::size_t>(p.feature_dim));
    for (int k = 0; k < p.feature_dim; ++k) {
        double acc = p.proj_b[static_cast<std::size_t>(k)];
        for (std::size_t j = 0; j < cur.size(); ++j)
            acc += p.proj_w[static_cast<std::size_t>(k) * cur.size() + j] * cur[j];
        out[static_cast<std::size_t>(k)] = acc;
    }
    return out;
}

void mask_encoder_backward(const MaskEncoderParams& p, const MaskEncoderCache& cache,
                           const std::vector<double>& dy, MaskEncoderParams& grads) {
    const std::vector<double>& flat = cache.flat;
    std::vector<double> dflat(flat.size(), 0.0);
    for (int k = 0; k < p.feature_dim; ++k) {
        grads.proj_b[static_cast<std::size_t>(k)] += dy[static_cast<std::size_t>(k)];
        for (std::size_t j = 0; j < flat.size(); ++j) {
            grads.proj_w[static_cast<std::size_t>(k) * flat.size() + j] +=
                dy[static_cast<std::size_t>(k)] * flat[j];
            dflat[j] += p.proj_w[static_cast<std::size_t>(k) * flat.size() + j] *
                        dy[static_cast<std::size_t>(k)];
        }
    }

    std::vector<double> dpooled = std::move(dflat);
    for (int s = 2; s >= 0; --s) {
        const auto& act = cache.stage_act[static_cast<std::size_t>(s)];
        const auto& input = cache.stage_in[static_cast<std::size_t>(s)];
        const auto& argmax = cache.pool_argmax[static_cast<std::size_t>(s)];
        int out_ch = kConvFilters[s];
        int in_ch = s == 0 ? 1 : kConvFilters[s - 1];
        int side = p.crop_size >> s;

        std::vector<double> dz(act.size(), 0.0);
        for (std::size_t i = 0; i < dpooled.size(); ++i) {
            std::size_t j = static_cast<std::size_t>(argmax[i]);
            dz[j] += dpooled[i] * (1.0 - act[j] * act[j]);
        }

        std::vector<double> dinput(input.size(), 0.0);
        const Tensor& w = p.stages[static_cast<std::size_t>(s)].w;
        Tensor& gw = grads.stages[static_cast<std::size_t>(s)].w;
        Tensor& gb = grads.stages[static_cast<std::size_t>(s)].b;
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    double d = dz[(static_cast<std::size_t>(oc) * side + y) * side + x];
                    if (d == 0.0) continue;
                    gb[static_cast<std::size_t>(oc)] += d;
                    for (int ic = 0; ic < in_ch; ++ic)
                        for (int ky = 0; ky < 3; ++ky) {
                            int yy = y + ky - 1;
                            if (yy < 0 || yy >= side) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int xx = x + kx - 1;
                                if (xx < 0 || xx >= side) continue;
                                std::size_t widx =
                                    ((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + ky) * 3 + kx;
                                std::size_t iidx =
                                    (static_cast<std::size_t>(ic) * side + yy) * side + xx;
                                gw[widx] += d * input[iidx];
                                dinput[iidx] += d * w[widx];
                            }
                        }
                }
        }
        dpooled = std::move(dinput);
    }
}

LstmCellParams LstmCellParams::init(int input_size, int hidden_size, Rng& rng) {
    if (input_size < 1 || hidden_size < 1)
        throw ValidationError("LSTM sizes must be positive");
    LstmCellParams p;
    p.input_size = input_size;
    p.hidden_size = hidden_size;
    p.w = Tensor({4 * hidden_size, input_size + hidden_size});
    p.b = Tensor({4 * hidden_size});
    fill_uniform(p.w, glorot_limit(input_size + hidden_size, 4 * hidden_size), rng);
    for (int u = 0; u < hidden_size; ++u) p.b[static_cast<std::size_t>(hidden_size + u)] = 1.0;
    return p;
}

namespace {

// Shared by the public step and the cached forward: fills gate activations
// (i,f,g,o blocks) and the new state.
void lstm_step_impl(const LstmCellParams& p, const std::vector<double>& x,
                    const std::vector<double>& h, const std::vector<double>& c,
                    std::vector<double>& gates, std::vector<double>& h_out,
                    std::vector<double>& c_out, std::vector<double>& tanh_c_out) {
    int H = p.hidden_size, I = p.input_size;
    if (static_cast<int>(x.size()) != I || static_cast<int>(h.size()) != H ||
        static_cast<int>(c.size()) != H)
        throw ValidationError("lstm_step dimension mismatch");
    gates.assign(static_cast<std::size_t>(4 * H), 0.0);
    for (int row = 0; row < 4 * H; ++row) {
        double acc = p.b[static_cast<std::size_t>(row)];
        const double* wrow = p.w.v.data() + static_cast<std::size_t>(row) * (I + H);
        for (int j = 0; j < I; ++j) acc += wrow[j] * x[static_cast<std::size_t>(j)];
        for (int j = 0; j < H; ++j) acc += wrow[I + j] * h[static_cast<std::size_t>(j)];
        gates[static_cast<std::size_t>(row)] = acc;
    }
    h_out.assign(static_cast<std::size_t>(H), 0.0);
    c_out.assign(static_cast<std::size_t>(H), 0.0);
    tanh_c_out.assign(static_cast<std::size_t>(H), 0.0);
    for (int u = 0; u < H; ++u) {
        double ig = sigmoid(gates[static_cast<std::size_t>(u)]);
        double fg = sigmoid(gates[static_cast<std::size_t>(H + u)]);
        double gg = std::tanh(gates[static_cast<std::size_t>(2 * H + u)]);
        double og = sigmoid(gates[static_cast<std::size_t>(3 * H + u)]);
        gates[static_cast<std::size_t>(u)] = ig;
        gates[static_cast<std::size_t>(H + u)] = fg;
        gates[static_cast<std::size_t>(2 * H + u)] = gg;
        gates[static_cast<std::size_t>(3 * H + u)] = og;
        double cn = fg * c[static_cast<std::size_t>(u)] + ig * gg;
        c_out[static_cast<std::size_t>(u)] = cn;
        tanh_c_out[static_cast<std::size_t>(u)] = std::tanh(cn);
        h_out[static_cast<std::size_t>(u)] = og * tanh_c_out[static_cast<std::size_t>(u)];
    }
}

}  // namespace

LstmState lstm_step(const LstmCellParams& p, const std::vector<double>& x,
                    const std::vector<double>& h, const std::vector<double>& c) {
    std::vector<double> gates, tanh_c;
    LstmState out;
    lstm_step_impl(p, x, h, c, gates, out.h, out.c, tanh_c);
    check_finite(out.h, "lstm hidden state");
    check_finite(out.c, "lstm cell state");
    return out;
}

SeverityModel SeverityModel::init(int feature_dim, int hidden_size, int crop_size,
                                  MaskCombine combine, std::uint64_t seed) {
    if (feature_dim < 6) throw ValidationError("feature_dim must be >= 6");
    SeverityModel m;
    m.feature_dim = feature_dim;
    m.hidden_size = hidden_size;
    m.combine = combine;
    Rng enc_rng = Rng::stream(seed, 1);
    Rng lstm_rng = Rng::stream(seed, 2);
    Rng head_rng = Rng::stream(seed, 3);
    m.mask_encoder = MaskEncoderParams::init(crop_size, feature_dim, enc_rng);
    // The branch projection starts at zero: masks-on models begin on the
    // boxes-only trajectory and fade the mask branch in as it becomes useful.
    std::fill(m.mask_encoder.proj_w.v.begin(), m.mask_encoder.proj_w.v.end(), 0.0);
    std::fill(m.mask_encoder.proj_b.v.begin(), m.mask_encoder.proj_b.v.end(), 0.0);
    m.lstm = LstmCellParams::init(m.input_dim(), hidden_size, lstm_rng);
    m.head_w = Tensor({3, hidden_size});
    m.head_b = Tensor({3});
    fill_uniform(m.head_w, glorot_limit(hidden_size, 3), head_rng);
    return m;
}

void visit_params(SeverityModel& m, const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < m.mask_encoder.stages.size(); ++s) {
        fn("enc.conv" + std::to_string(s) + ".w", m.mask_encoder.stages[s].w);
        fn("enc.conv" + std::to_string(s) + ".b", m.mask_encoder.stages[s].b);
    }
    fn("enc.proj.w", m.mask_encoder.proj_w);
    fn("enc.proj.b", m.mask_encoder.proj_b);
    fn("lstm.w", m.lstm.w);
    fn("lstm.b", m.lstm.b);
    fn("head.w", m.head_w);
    fn("head.b", m.head_b);
}

void visit_params(const SeverityModel& m,
                  const std::function<void(const std::string&, const Tensor&)>& fn) {
    visit_params(const_cast<SeverityModel&>(m),
                 [&](const std::string& name, Tensor& t) { fn(name, t); });
}

SeverityModel zeros_like(const SeverityModel& m) {
    SeverityModel z = m;
    visit_params(z, [](const std::string&, Tensor& t) { std::fill(t.v.begin(), t.v.end(), 0.0); });
    return z;
}

ForwardResult forward(const SeverityModel& model, const FeatureSequence& seq) {
    if (seq.steps.empty()) throw ValidationError("forward on an empty sequence");
    int H = model.hidden_size;
    ForwardResult r;
    std::vector<double> h(static_cast<std::size_t>(H), 0.0), c(static_cast<std::size_t>(H), 0.0);
    for (const auto& step : seq.steps) {
        if (static_cast<int>(step.base.size()) != model.feature_dim)
            throw ValidationError("sequence step width does not match model feature_dim");
        std::vector<double> x;
        std::optional<MaskEncoderCache> branch_cache;
        std::vector<double> branch;
        if (step.crop) {
            branch_cache.emplace();
            branch = mask_encoder_forward(model.mask_encoder, *step.crop, &*branch_cache);
        }
        if (model.combine == MaskCombine::Add) {
            x = step.base;
            if (step.crop)
                for (int k = 0; k < model.feature_dim; ++k)
                    x[static_cast<std::size_t>(k)] += branch[static_cast<std::size_t>(k)];
        } else {
            x = step.base;
            x.resize(static_cast<std::size_t>(2 * model.feature_dim), 0.0);
            if (step.crop)
                for (int k = 0; k < model.feature_dim; ++k)
                    x[static_cast<std::size_t>(model.feature_dim + k)] =
                        branch[static_cast<std::size_t>(k)];
        }
        std::vector<double> gates, h_new, c_new, tanh_c;
        lstm_step_impl(model.lstm, x, h, c, gates, h_new, c_new, tanh_c);
        r.cache.x.push_back(std::move(x));
        r.cache.gates.push_back(std::move(gates));
        r.cache.h.push_back(h_new);
        r.cache.c.push_back(c_new);
        r.cache.tanh_c.push_back(std::move(tanh_c));
        r.cache.branch.push_back(std::move(branch_cache));
        h = std::move(h_new);
        c = std::move(c_new);
    }
    for (int k = 0; k < 3; ++k) {
        double acc = model.head_b[static_cast<std::size_t>(k)];
        for (int j = 0; j < H; ++j)
            acc += model.head_w[static_cast<std::size_t>(k) * H + j] * h[static_cast<std::size_t>(j)];
        r.cache.logits[static_cast<std::size_t>(k)] = acc;
    }
    double mx = std::max({r.cache.logits[0], r.cache.logits[1], r.cache.logits[2]});
    double denom = 0.0;
    for (int k = 0; k < 3; ++k) denom += std::exp(r.cache.logits[static_cast<std::size_t>(k)] - mx);
    for (int k = 0; k < 3; ++k) {
        double p = std::exp(r.cache.logits[static_cast<std::size_t>(k)] - mx) / denom;
        if (!std::isfinite(p)) throw NumericError("non-finite probability in forward");
        r.cache.probs[static_cast<std::size_t>(k)] = p;
        r.probs[static_cast<std::size_t>(k)] = p;
    }
    return r;
}

double cross_entropy(const std::array<double, 3>& logits, SeverityGrade label) {
    double mx = std::max({logits[0], logits[1], logits[2]});
    double denom = 0.0;
    for (double z : logits) denom += std::exp(z - mx);
    return std::log(denom) + mx - logits[static_cast<std::size_t>(grade_index(label))];
}

SeverityModel backward(const SeverityModel& model, const ForwardCache& cache, SeverityGrade label) {
    if (cache.x.empty()) throw ValidationError("backward on an empty cache");
    SeverityModel grads = zeros_like(model);
    int H = model.hidden_size;
    int I = model.lstm.input_size;
    std::size_t T = cache.x.size();

    std::array<double, 3> dlogits = cache.probs;
    dlogits[static_cast<std::size_t>(grade_index(label))] -= 1.0;

    const std::vector<double>& h_last = cache.h[T - 1];
    std::vector<double> dh(static_cast<std::size_t>(H), 0.0);
    for (int k = 0; k < 3; ++k) {
        grads.head_b[static_cast<std::size_t>(k)] += dlogits[static_cast<std::size_t>(k)];
        for (int j = 0; j < H; ++j) {
            grads.head_w[static_cast<std::size_t>(k) * H + j] +=
                dlogits[static_cast<std::size_t>(k)] * h_last[static_cast<std::size_t>(j)];
            dh[static_cast<std::size_t>(j)] += model.head_w[static_cast<std::size_t>(k) * H + j] *
                                               dlogits[static_cast<std::size_t>(k)];
        }
    }

    std::vector<double> dc(static_cast<std::size_t>(H), 0.0);
    std::vector<double> zeros_h(static_cast<std::size_t>(H), 0.0);
    for (std::size_t t = T; t-- > 0;) {
        const auto& gates = cache.gates[t];
        const auto& tanh_c = cache.tanh_c[t];
        const auto& c_prev = t == 0 ? zeros_h : cache.c[t - 1];
        const auto& h_prev = t == 0 ? zeros_h : cache.h[t - 1];
        const auto& x = cache.x[t];

        std::vector<double> dpre(static_cast<std::size_t>(4 * H));
        for (int u = 0; u < H; ++u) {
            double ig = gates[static_cast<std::size_t>(u)];
            double fg = gates[static_cast<std::size_t>(H + u)];
            double gg = gates[static_cast<std::size_t>(2 * H + u)];
            double og = gates[static_cast<std::size_t>(3 * H + u)];
            double tc = tanh_c[static_cast<std::size_t>(u)];

            double dout = dh[static_cast<std::size_t>(u)];
            double dc_total = dc[static_cast<std::size_t>(u)] + dout * og * (1.0 - tc * tc);
            double dog = dout * tc;
            double dig = dc_total * gg;
            double dgg = dc_total * ig;
            double dfg = dc_total * c_prev[static_cast<std::size_t>(u)];
            dc[static_cast<std::size_t>(u)] = dc_total * fg;

            dpre[static_cast<std::size_t>(u)] = dig * ig * (1.0 - ig);
            dpre[static_cast<std::size_t>(H + u)] = dfg * fg * (1.0 - fg);
            dpre[static_cast<std::size_t>(2 * H + u)] = dgg * (1.0 - gg * gg);
            dpre[static_cast<std::size_t>(3 * H + u)] = dog * og * (1.0 - og);
        }

        std::vector<double> dx(static_cast<std::size_t>(I), 0.0);
        std::fill(dh.begin(), dh.end(), 0.0);
        for (int row = 0; row < 4 * H; ++row) {
            double d = dpre[static_cast<std::size_t>(row)];
            grads.lstm.b[static_cast<std::size_t>(row)] += d;
            if (d == 0.0) continue;
            const double* wrow = model.lstm.w.v.data() + static_cast<std::size_t>(row) * (I + H);
            double* grow = grads.lstm.w.v.data() + static_cast<std::size_t>(row) * (I + H);
            for (int j = 0; j < I; ++j) {
                grow[j] += d * x[static_cast<std::size_t>(j)];
                dx[static_cast<std::size_t>(j)] += d * wrow[j];
            }
            for (int j = 0; j < H; ++j) {
                grow[I + j] += d * h_prev[static_cast<std::size_t>(j)];
                dh[static_cast<std::size_t>(j)] += d * wrow[I + j];
            }
        }

        if (cache.branch[t]) {
            std::vector<double> dbranch(static_cast<std::size_t>(model.feature_dim));
            int offset = model.combine == MaskCombine::Concat ? model.feature_dim : 0;
            for (int k = 0; k < model.feature_dim; ++k)
                dbranch[static_cast<std::size_t>(k)] = dx[static_cast<std::size_t>(offset + k)];
            mask_encoder_backward(model.mask_encoder, *cache.branch[t], dbranch,
                                  grads.mask_encoder);
        }
    }
    return grads;
}

double grad_check(const SeverityModel& model, const FeatureSequence& seq, SeverityGrade label,
                  double epsilon, std::uint64_t subsample_seed) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
        throw ValidationError("grad_check epsilon must lie in [1e-7, 1e-3]");

    SeverityModel probe = model;
    std::vector<double*> slots;
    visit_params(probe, [&](const std::string&, Tensor& t) {
        for (auto& v : t.v) slots.push_back(&v);
    });

    ForwardResult base = forward(probe, seq);
    double base_loss = cross_entropy(base.cache.logits, label);
    if (!std::isfinite(base_loss)) throw NumericError("non-finite loss in grad_check");
    SeverityModel grads = backward(probe, base.cache, label);
    std::vector<double> analytic;
    analytic.reserve(slots.size());
    visit_params(grads, [&](const std::string&, Tensor& t) {
        for (double v : t.v) analytic.push_back(v);
    });

    std::vector<std::size_t> indices(slots.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    constexpr std::size_t kMaxChecked = 10000;
    if (indices.size() > kMaxChecked) {
        Rng rng = Rng::stream(subsample_seed, 0xabcd);
        rng.shuffle(indices);
        indices.resize(kMaxChecked);
    }

    double worst = 0.0;
    for (std::size_t i : indices) {
        double saved = *slots[i];
        *slots[i] = saved + epsilon;
        double up = cross_entropy(forward(probe, seq).cache.logits, label);
        *slots[i] = saved - epsilon;
        double down = cross_entropy(forward(probe, seq).cache.logits, label);
        *slots[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("non-finite loss in grad_check");
        double numeric = (up - down) / (2.0 * epsilon);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

TrainHistory train(SeverityModel& model,
                   const std::vector<std::pair<FeatureSequence, SeverityGrade>>& dataset,
                   const TrainHyper& hyper) {
    if (dataset.empty()) throw ValidationError("training dataset is empty");
    if (hyper.epochs < 0) throw ValidationError("epochs must be >= 0");

    SeverityModel velocity = zeros_like(model);
    TrainHistory history;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::vector<std::size_t> order(dataset.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng = Rng::stream(hyper.seed, static_cast<std::uint64_t>(epoch));
        rng.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t i : order) {
            const auto& [seq, label] = dataset[i];
            ForwardResult fr = forward(model, seq);
            double loss = cross_entropy(fr.cache.logits, label);
            double weight =
                hyper.class_weights ? (*hyper.class_weights)[static_cast<std::size_t>(grade_index(label))] : 1.0;
            loss *= weight;
            if (!std::isfinite(loss))
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + " sample " + std::to_string(i));
            loss_sum += loss;
            SeverityModel grads = backward(model, fr.cache, label);

            std::vector<Tensor*> vel, grad, par;
            visit_params(velocity, [&](const std::string&, Tensor& t) { vel.push_back(&t); });
            visit_params(grads, [&](const std::string&, Tensor& t) { grad.push_back(&t); });
            visit_params(model, [&](const std::string&, Tensor& t) { par.push_back(&t); });

            double scale = weight;
            if (hyper.clip_norm > 0.0) {
                double sq = 0.0;
                for (auto* g : grad)
                    for (double v : g->v) sq += (weight * v) * (weight * v);
                double norm = std::sqrt(sq);
                if (norm > hyper.clip_norm) scale = weight * hyper.clip_norm / norm;
            }
            // vel = momentum*vel - lr*grad; param += vel
            for (std::size_t t = 0; t < par.size(); ++t)
                for (std::size_t j = 0; j < par[t]->size(); ++j) {
                    double g = scale * grad[t]->v[j];
                    vel[t]->v[j] = hyper.momentum * vel[t]->v[j] - hyper.learning_rate * g;
                    par[t]->v[j] += vel[t]->v[j];
                }
        }

        EpochStats stats;
        stats.mean_loss = loss_sum / static_cast<double>(dataset.size());
        std::size_t correct = 0;
        for (const auto& [seq, label] : dataset)
            if (predict_severity(model, seq).grade == label) ++correct;
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
        history.epochs.push_back(stats);
        if (hyper.stop_when_perfect && stats.train_accuracy == 1.0) break;
    }
    return history;
}

Prediction predict_severity(const SeverityModel& model, const FeatureSequence& seq) {
    ForwardResult fr = forward(model, seq);
    int best = 0;
    for (int k = 1; k < 3; ++k)
        if (fr.probs[static_cast<std::size_t>(k)] > fr.probs[static_cast<std::size_t>(best)])
            best = k;
    return Prediction{grade_from_index(best), fr.probs};
}

// ----- checkpoint -------------------------------------------------------------

namespace {
constexpr const char* kCkptMagic = "LESIONKIT-CKPT";
constexpr int kCkptVersion = 1;
}  // namespace

void save_model(const SeverityModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write checkpoint: " + path);
    out << kCkptMagic << " " << kCkptVersion << "\n";
    out << "feature_dim " << model.feature_dim << "\n";
    out << "hidden " << model.hidden_size << "\n";
    out << "crop " << model.mask_encoder.crop_size << "\n";
    out << "combine " << (model.combine == MaskCombine::Add ? "add" : "concat") << "\n";
    visit_params(model, [&](const std::string& name, const Tensor& t) {
        out << "tensor " << name;
        for (int d : t.shape) out << " " << d;
        out << "\n";
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (i) out << " ";
            out << double_to_hex(t[i]);
        }
        out << "\n";
    });
    out << "end\n";
}

SeverityModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint: " + path);
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != kCkptMagic) throw ParseError("not a model checkpoint: " + path);
    if (version != kCkptVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(version));

    int feature_dim = 0, hidden = 0, crop = 0;
    std::string combine_s;
    for (int k = 0; k < 4; ++k) {
        std::string key;
        in >> key;
        if (key == "feature_dim")
            in >> feature_dim;
        else if (key == "hidden")
            in >> hidden;
        else if (key == "crop")
            in >> crop;
        else if (key == "combine")
            in >> combine_s;
        else
            throw ParseError("unexpected checkpoint field: " + key);
    }
    MaskCombine combine = combine_s == "concat" ? MaskCombine::Concat : MaskCombine::Add;
    SeverityModel model = SeverityModel::init(feature_dim, hidden, crop, combine, 0);

    std::map<std::string, Tensor*> by_name;
    visit_params(model, [&](const std::string& name, Tensor& t) { by_name[name] = &t; });
    std::map<std::string, bool> seen;

    std::string tok;
    while (in >> tok) {
        if (tok == "end") break;
        if (tok != "tensor") throw ParseError("expected tensor record, got: " + tok);
        std::string name;
        in >> name;
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ParseError("unknown tensor in checkpoint: " + name);
        Tensor& t = *it->second;
        for (std::size_t d = 0; d < t.shape.size(); ++d) {
            int extent = 0;
            in >> extent;
            if (extent != t.shape[d])
                throw ParseError("shape mismatch for tensor " + name);
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::string hex;
            in >> hex;
            t[i] = hex_to_double(hex);
        }
        seen[name] = true;
    }
    for (const auto& [name, ptr] : by_name) {
        (void)ptr;
        if (!seen.count(name)) throw ParseError("checkpoint missing tensor: " + name);
    }
    return model;
}

}  // namespace lesionkit
