#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lesionkit/common.hpp"
#include "lesionkit/core.hpp"
#include "lesionkit/encoder.hpp"

namespace lesionkit {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    std::size_t size() const { return v.size(); }
    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }
};

struct ConvStage {
    Tensor w;  // [out_channels, in_channels, 3, 3]
    Tensor b;  // [out_channels]
};

// Three conv stages plus a dense projection down to feature_dim.
struct MaskEncoderParams {
    int crop_size = 32;
    int feature_dim = 6;
    std::vector<ConvStage> stages;
    Tensor proj_w;  // [feature_dim, flat]
    Tensor proj_b;  // [feature_dim]

    int flat_size() const;
    static MaskEncoderParams init(int crop_size, int feature_dim, Rng& rng);
    static MaskEncoderParams zeros(int crop_size, int feature_dim);
};

struct MaskEncoderCache {
    std::vector<std::vector<double>> stage_in;      // input raster per stage
    std::vector<std::vector<double>> stage_act;     // tanh output, pre-pool
    std::vector<std::vector<int>> pool_argmax;      // flat index into stage_act
    std::vector<double> flat;                       // pooled output of last stage
};

std::vector<double> mask_encoder_forward(const MaskEncoderParams& p,
                                         const std::vector<double>& crop,
                                         MaskEncoderCache* cache = nullptr);

// dy is d(loss)/d(branch output); parameter gradients are accumulated into
// `grads` (same shapes as p).
void mask_encoder_backward(const MaskEncoderParams& p, const MaskEncoderCache& cache,
                           const std::vector<double>& dy, MaskEncoderParams& grads);

// Gate rows are packed [input, forget, candidate, output], each hidden_size
// wide, over columns [x; h].
struct LstmCellParams {
    int input_size = 0;
    int hidden_size = 0;
    Tensor w;  // [4*hidden, input+hidden]
    Tensor b;  // [4*hidden], forget block initialized to 1

    static LstmCellParams init(int input_size, int hidden_size, Rng& rng);
};

struct LstmState {
    std::vector<double> h;
    std::vector<double> c;
};

LstmState lstm_step(const LstmCellParams& p, const std::vector<double>& x,
                    const std::vector<double>& h, const std::vector<double>& c);

struct SeverityModel {
    int feature_dim = 6;
    int hidden_size = 16;
    MaskCombine combine = MaskCombine::Add;
    MaskEncoderParams mask_encoder;
    LstmCellParams lstm;
    Tensor head_w;  // [3, hidden]
    Tensor head_b;  // [3]

    int input_dim() const {
        return combine == MaskCombine::Concat ? 2 * feature_dim : feature_dim;
    }

    static SeverityModel init(int feature_dim, int hidden_size, int crop_size,
                              MaskCombine combine, std::uint64_t seed);
};

// Visits every parameter tensor in a fixed order (serialization, optimizer and
// gradient-check all share it).
void visit_params(SeverityModel& m, const std::function<void(const std::string&, Tensor&)>& fn);
void visit_params(const SeverityModel& m,
                  const std::function<void(const std::string&, const Tensor&)>& fn);

SeverityModel zeros_like(const SeverityModel& m);

struct ForwardCache {
    // per step
    std::vector<std::vector<double>> x;       // lstm inputs
    std::vector<std::vector<double>> gates;   // i,f,g,o activations, 4H per step
    std::vector<std::vector<double>> c;       // post-step cell
    std::vector<std::vector<double>> h;       // post-step hidden
    std::vector<std::vector<double>> tanh_c;
    std::vector<std::optional<MaskEncoderCache>> branch;
    std::array<double, 3> logits{};
    std::array<double, 3> probs{};
};

struct ForwardResult {
    std::array<double, 3> probs{};
    ForwardCache cache;
};

ForwardResult forward(const SeverityModel& model, const FeatureSequence& seq);

double cross_entropy(const std::array<double, 3>& logits, SeverityGrade label);

// Exact analytic gradients through softmax-CE, the dense head, the LSTM unroll
// and (for steps carrying crops) the mask-encoder stages.
SeverityModel backward(const SeverityModel& model, const ForwardCache& cache, SeverityGrade label);

// Max over parameters of |analytic - numeric| / max(|analytic|, |numeric|,
// 1e-8) with central differences of step epsilon. Above 10000 parameters a
// seeded subsample of 10000 is checked.
double grad_check(const SeverityModel& model, const FeatureSequence& seq, SeverityGrade label,
                  double epsilon, std::uint64_t subsample_seed = 0);

struct TrainHyper {
    double learning_rate = 0.05;
    double momentum = 0.9;
    int epochs = 200;
    double clip_norm = 0.5;  // global gradient norm cap; 0 disables
    std::uint64_t seed = 0;
    bool stop_when_perfect = false;
    std::optional<std::array<double, 3>> class_weights;  // off by default
};

struct EpochStats {
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
};

TrainHistory train(SeverityModel& model,
                   const std::vector<std::pair<FeatureSequence, SeverityGrade>>& dataset,
                   const TrainHyper& hyper);

struct Prediction {
    SeverityGrade grade;
    std::array<double, 3> probs;
};

// Argmax with ties broken toward the lower grade.
Prediction predict_severity(const SeverityModel& model, const FeatureSequence& seq);

// Text checkpoint with hexadecimal float literals; round-trips losslessly.
void save_model(const SeverityModel& model, const std::string& path);
SeverityModel load_model(const std::string& path);

}  // namespace lesionkit
