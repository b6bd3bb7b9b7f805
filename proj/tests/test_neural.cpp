#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "lesionkit/neural.hpp"
#include "testgen.hpp"

using namespace lesionkit;
namespace fs = std::filesystem;

namespace {

FeatureSequence random_sequence(Rng& rng, int steps, int feature_dim, bool with_crops, int crop) {
    FeatureSequence seq;
    seq.feature_dim = feature_dim;
    seq.image_id = "seq";
    for (int t = 0; t < steps; ++t) {
        FeatureStep step;
        for (int k = 0; k < feature_dim; ++k) step.base.push_back(rng.uniform(-1.0, 1.0));
        if (with_crops) {
            std::vector<double> c(static_cast<std::size_t>(crop) * crop);
            for (auto& v : c) v = rng.next_double() < 0.4 ? 1.0 : 0.0;
            step.crop = std::move(c);
        }
        seq.steps.push_back(std::move(step));
    }
    return seq;
}

// Independent step-by-step scalar evaluation of the gate equations.
void lstm_step_scalar(const LstmCellParams& p, const std::vector<double>& x,
                      const std::vector<double>& h, const std::vector<double>& c,
                      std::vector<double>& h_out, std::vector<double>& c_out) {
    int H = p.hidden_size, I = p.input_size;
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    h_out.assign(H, 0.0);
    c_out.assign(H, 0.0);
    for (int u = 0; u < H; ++u) {
        double pre[4];
        for (int gate = 0; gate < 4; ++gate) {
            int row = gate * H + u;
            double acc = p.b[row];
            for (int j = 0; j < I; ++j) acc += p.w[static_cast<std::size_t>(row) * (I + H) + j] * x[j];
            for (int j = 0; j < H; ++j)
                acc += p.w[static_cast<std::size_t>(row) * (I + H) + I + j] * h[j];
            pre[gate] = acc;
        }
        double ig = sig(pre[0]), fg = sig(pre[1]), gg = std::tanh(pre[2]), og = sig(pre[3]);
        c_out[u] = fg * c[u] + ig * gg;
        h_out[u] = og * std::tanh(c_out[u]);
    }
}

}  // namespace

TEST_SUITE_BEGIN("neural");

TEST_CASE("lstm_step zero weights and state give zero outputs") {
    LstmCellParams p;
    p.input_size = 3;
    p.hidden_size = 4;
    p.w = Tensor({16, 7});
    p.b = Tensor({16});
    std::vector<double> x(3, 0.0), h(4, 0.0), c(4, 0.0);
    LstmState out = lstm_step(p, x, h, c);
    for (double v : out.h) CHECK(v == 0.0);
    for (double v : out.c) CHECK(v == 0.0);
}

TEST_CASE("forget bias alone scales the carried cell") {
    LstmCellParams p;
    p.input_size = 2;
    p.hidden_size = 3;
    p.w = Tensor({12, 5});
    p.b = Tensor({12});
    for (int u = 0; u < 3; ++u) p.b[3 + u] = 1.0;  // forget block
    std::vector<double> x(2, 0.0), h(3, 0.0), c{1.0, 1.0, 1.0};
    LstmState out = lstm_step(p, x, h, c);
    double keep = 1.0 / (1.0 + std::exp(-1.0));
    for (double v : out.c) CHECK(v == doctest::Approx(keep).epsilon(1e-12));
}

TEST_CASE("lstm_step matches the scalar oracle on random inputs") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        LstmCellParams p = LstmCellParams::init(5, 7, rng);
        std::vector<double> x, h, c;
        for (int i = 0; i < 5; ++i) x.push_back(rng.uniform(-2, 2));
        for (int i = 0; i < 7; ++i) h.push_back(rng.uniform(-1, 1));
        for (int i = 0; i < 7; ++i) c.push_back(rng.uniform(-2, 2));
        LstmState got = lstm_step(p, x, h, c);
        std::vector<double> h_ref, c_ref;
        lstm_step_scalar(p, x, h, c, h_ref, c_ref);
        for (int u = 0; u < 7; ++u) {
            CHECK(got.h[u] == doctest::Approx(h_ref[u]).epsilon(1e-12));
            CHECK(got.c[u] == doctest::Approx(c_ref[u]).epsilon(1e-12));
        }
    }
    LstmCellParams p;
    p.input_size = 2;
    p.hidden_size = 2;
    p.w = Tensor({8, 4});
    p.b = Tensor({8});
    std::vector<double> wrong(3, 0.0), h(2, 0.0), c(2, 0.0);
    CHECK_THROWS_AS(lstm_step(p, wrong, h, c), ValidationError);
}

TEST_CASE("forward of the zero model is uniform") {
    SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 3);
    visit_params(model, [](const std::string&, Tensor& t) {
        std::fill(t.v.begin(), t.v.end(), 0.0);
    });
    Rng rng(1);
    FeatureSequence seq = random_sequence(rng, 3, 6, false, 8);
    ForwardResult r = forward(model, seq);
    for (double p : r.probs) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(predict_severity(model, seq).grade == SeverityGrade::Healthy);  // tie to lowest
}

TEST_CASE("probabilities are positive and sum to one") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, seed);
        Rng rng(seed + 100);
        FeatureSequence seq = random_sequence(rng, 4, 6, true, 8);
        ForwardResult r = forward(model, seq);
        double sum = 0.0;
        for (double p : r.probs) {
            CHECK(p > 0.0);
            CHECK(p < 1.0);
            sum += p;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 0);
    CHECK_THROWS_AS(forward(model, FeatureSequence{}), ValidationError);
}

TEST_CASE("zero input weights make the output depend only on length") {
    SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 5);
    // Zero the input-facing columns; keep recurrent weights, and give the
    // gates nonzero biases so the state leaves the origin.
    int I = model.lstm.input_size, H = model.lstm.hidden_size;
    for (int row = 0; row < 4 * H; ++row)
        for (int j = 0; j < I; ++j) model.lstm.w[static_cast<std::size_t>(row) * (I + H) + j] = 0.0;
    Rng brng(55);
    for (auto& b : model.lstm.b.v) b = brng.uniform(-0.5, 0.5);

    Rng rng(6);
    FeatureSequence a = random_sequence(rng, 3, 6, false, 8);
    FeatureSequence b = random_sequence(rng, 3, 6, false, 8);  // same length, new contents
    ForwardResult ra = forward(model, a);
    ForwardResult rb = forward(model, b);
    for (int k = 0; k < 3; ++k) CHECK(ra.probs[k] == rb.probs[k]);

    FeatureSequence longer = a;
    longer.steps.push_back(a.steps.back());
    ForwardResult rl = forward(model, longer);
    bool same = true;
    for (int k = 0; k < 3; ++k) same = same && rl.probs[k] == ra.probs[k];
    CHECK_FALSE(same);
}

TEST_CASE("head bias gradient equals probabilities minus one-hot") {
    SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 9);
    Rng rng(9);
    FeatureSequence seq = random_sequence(rng, 2, 6, false, 8);
    ForwardResult r = forward(model, seq);
    SeverityModel grads = backward(model, r.cache, SeverityGrade::Medium);
    for (int k = 0; k < 3; ++k) {
        double expected = r.probs[k] - (k == 1 ? 1.0 : 0.0);
        CHECK(grads.head_b[k] == doctest::Approx(expected).epsilon(1e-12));
    }
    // When the predicted distribution already equals the one-hot label the
    // logit gradient vanishes.
    std::array<double, 3> onehot{0.0, 1.0, 0.0};
    for (int k = 0; k < 3; ++k) CHECK(onehot[k] - (k == 1 ? 1.0 : 0.0) == 0.0);
}

TEST_CASE("gradients match central differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, seed);
        Rng rng(seed * 13 + 1);
        FeatureSequence seq = random_sequence(rng, 3, 6, true, 8);
        SeverityGrade label = grade_from_index(static_cast<int>(rng.next_below(3)));
        CHECK(grad_check(model, seq, label, 1e-5) < 1e-4);
    }
}

TEST_CASE("central differences are exact for a linear functional") {
    // The differencing scheme itself: for f(w) = c . w the central difference
    // recovers c to roundoff, far below the 1e-4 model tolerance.
    Rng rng(3);
    std::vector<double> c, w;
    for (int i = 0; i < 32; ++i) {
        c.push_back(rng.uniform(-2.0, 2.0));
        w.push_back(rng.uniform(-1.0, 1.0));
    }
    auto f = [&] {
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += c[i] * w[i];
        return acc;
    };
    double eps = 1e-5, worst = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        double saved = w[i];
        w[i] = saved + eps;
        double up = f();
        w[i] = saved - eps;
        double down = f();
        w[i] = saved;
        double numeric = (up - down) / (2.0 * eps);
        worst = std::max(worst,
                         std::abs(numeric - c[i]) / std::max({std::abs(numeric), std::abs(c[i]), 1e-8}));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("grad_check validates epsilon") {
    SeverityModel model = SeverityModel::init(6, 4, 8, MaskCombine::Add, 2);
    Rng rng(4);
    FeatureSequence seq = random_sequence(rng, 1, 6, false, 8);
    CHECK_THROWS_AS(grad_check(model, seq, SeverityGrade::Healthy, 0.0), ValidationError);
    CHECK_THROWS_AS(grad_check(model, seq, SeverityGrade::Healthy, 0.5), ValidationError);
}

TEST_CASE("training is deterministic and a zero rate is a no-op") {
    Rng rng(77);
    std::vector<std::pair<FeatureSequence, SeverityGrade>> data;
    for (int k = 0; k < 9; ++k)
        data.push_back({random_sequence(rng, 1 + k % 4, 6, false, 8),
                        grade_from_index(k % 3)});

    SUBCASE("zero learning rate leaves parameters untouched") {
        SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        SeverityModel before = model;
        TrainHyper hyper;
        hyper.learning_rate = 0.0;
        hyper.epochs = 3;
        TrainHistory hist = train(model, data, hyper);
        std::vector<double> a, b;
        visit_params(model, [&](const std::string&, Tensor& t) {
            a.insert(a.end(), t.v.begin(), t.v.end());
        });
        visit_params(before, [&](const std::string&, Tensor& t) {
            b.insert(b.end(), t.v.begin(), t.v.end());
        });
        CHECK(a == b);
        CHECK(hist.epochs[0].mean_loss == hist.epochs[1].mean_loss);
        CHECK(hist.epochs[1].mean_loss == hist.epochs[2].mean_loss);
    }

    SUBCASE("same seed gives bit-identical loss histories") {
        SeverityModel m1 = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        SeverityModel m2 = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        TrainHyper hyper;
        hyper.epochs = 10;
        hyper.seed = 42;
        TrainHistory h1 = train(m1, data, hyper);
        TrainHistory h2 = train(m2, data, hyper);
        REQUIRE(h1.epochs.size() == h2.epochs.size());
        for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
            CHECK(h1.epochs[e].mean_loss == h2.epochs[e].mean_loss);
            CHECK(h1.epochs[e].train_accuracy == h2.epochs[e].train_accuracy);
        }
    }

    SUBCASE("empty dataset is rejected") {
        SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        CHECK_THROWS_AS(train(model, {}, TrainHyper{}), ValidationError);
    }

    SUBCASE("a non-finite loss aborts training with a diagnostic") {
        SeverityModel model = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        auto poisoned = data;
        poisoned[4].first.steps[0].base[2] = std::numeric_limits<double>::quiet_NaN();
        TrainHyper hyper;
        hyper.epochs = 3;
        CHECK_THROWS_AS(train(model, poisoned, hyper), ComputeError);
    }

    SUBCASE("class weights scale the recorded loss") {
        SeverityModel m1 = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        SeverityModel m2 = SeverityModel::init(6, 8, 8, MaskCombine::Add, 1);
        TrainHyper plain;
        plain.epochs = 1;
        plain.learning_rate = 0.0;
        TrainHyper doubled = plain;
        doubled.class_weights = {2.0, 2.0, 2.0};
        TrainHistory h1 = train(m1, data, plain);
        TrainHistory h2 = train(m2, data, doubled);
        CHECK(h2.epochs[0].mean_loss == doctest::Approx(2.0 * h1.epochs[0].mean_loss));
    }
}

TEST_CASE("overfit on a small labeled set") {
    // Class determined by sequence length: learnable by construction.
    Rng rng(5);
    std::vector<std::pair<FeatureSequence, SeverityGrade>> data;
    for (int k = 0; k < 12; ++k) {
        int grade = k % 3;
        int steps = grade == 0 ? 1 : (grade == 1 ? 3 : 6);
        data.push_back({random_sequence(rng, steps, 6, false, 8), grade_from_index(grade)});
    }
    SeverityModel model = SeverityModel::init(6, 16, 8, MaskCombine::Add, 7);
    TrainHyper hyper;
    hyper.epochs = 120;
    hyper.seed = 7;
    hyper.stop_when_perfect = true;
    TrainHistory hist = train(model, data, hyper);
    CHECK(hist.epochs.back().train_accuracy == 1.0);
    CHECK(hist.epochs.size() < 120);

    // Every training item predicts its own label after the overfit.
    for (const auto& [seq, label] : data) CHECK(predict_severity(model, seq).grade == label);

    // Loss drops over the first epoch.
    CHECK(hist.epochs[1].mean_loss < hist.epochs[0].mean_loss);
}

TEST_CASE("hidden state is bounded and cell growth is at most linear") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(seed);
        LstmCellParams p = LstmCellParams::init(4, 6, rng);
        std::vector<double> h(6, 0.0), c(6, 0.0);
        for (int t = 1; t <= 40; ++t) {
            std::vector<double> x;
            for (int i = 0; i < 4; ++i) x.push_back(rng.uniform(-3, 3));
            LstmState s = lstm_step(p, x, h, c);
            h = s.h;
            c = s.c;
            for (double v : h) {
                CHECK(v > -1.0);
                CHECK(v < 1.0);
            }
            for (double v : c) CHECK(std::abs(v) <= static_cast<double>(t) + 1e-9);
        }
    }
}

TEST_CASE("checkpoint round-trips bit for bit") {
    SeverityModel model = SeverityModel::init(6, 8, 16, MaskCombine::Concat, 31);
    // Touch the weights with awkward values.
    model.head_b[0] = 1.0 / 3.0;
    model.head_b[1] = -0.0;
    model.head_b[2] = 1e-300;
    fs::path path = fs::temp_directory_path() / "lesionkit_model.ckpt";
    save_model(model, path.string());
    SeverityModel loaded = load_model(path.string());
    CHECK(loaded.feature_dim == model.feature_dim);
    CHECK(loaded.hidden_size == model.hidden_size);
    CHECK(loaded.combine == model.combine);
    std::vector<double> a, b;
    visit_params(model, [&](const std::string&, Tensor& t) {
        a.insert(a.end(), t.v.begin(), t.v.end());
    });
    visit_params(loaded, [&](const std::string&, Tensor& t) {
        b.insert(b.end(), t.v.begin(), t.v.end());
    });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    std::ofstream(path) << "NOT-A-CHECKPOINT 1\n";
    CHECK_THROWS_AS(load_model(path.string()), ParseError);
}

TEST_SUITE_END();
