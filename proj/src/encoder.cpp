#include "lesionkit/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "lesionkit/neural.hpp"

using nlohmann::json;

namespace lesionkit {

void EncoderConfig::check() const {
    if (mask_crop_size < 8 || (mask_crop_size & (mask_crop_size - 1)) != 0)
        throw ValidationError("mask_crop_size must be a power of two >= 8");
    int needed = include_score ? 7 : 6;
    if (feature_dim < needed)
        throw ValidationError("feature_dim must be >= " + std::to_string(needed));
    if (image_size < 1) throw ValidationError("image_size must be positive");
}

std::vector<double> crop_to_box(const BinaryMask& mask, const BoundingBox& box, int crop_size) {
    if (!box.valid()) throw ValidationError("crop_to_box with an invalid box");
    int w = box.x_max - box.x_min, h = box.y_max - box.y_min;
    std::vector<double> crop(static_cast<std::size_t>(crop_size) * crop_size, 0.0);
    for (int j = 0; j < crop_size; ++j) {
        int sy = box.y_min + std::min(h - 1, static_cast<int>((j + 0.5) * h / crop_size));
        for (int i = 0; i < crop_size; ++i) {
            int sx = box.x_min + std::min(w - 1, static_cast<int>((i + 0.5) * w / crop_size));
            if (sx >= 0 && sy >= 0 && sx < mask.width() && sy < mask.height() && mask.get(sx, sy))
                crop[static_cast<std::size_t>(j) * crop_size + i] = 1.0;
        }
    }
    return crop;
}

namespace {

std::vector<double> base_features(const Detection& det, const EncoderConfig& cfg) {
    double div = cfg.normalize_boxes ? static_cast<double>(cfg.image_size) : 1.0;
    std::vector<double> base(static_cast<std::size_t>(cfg.feature_dim), 0.0);
    base[0] = det.box.x_min / div;
    base[1] = det.box.y_min / div;
    base[2] = det.box.x_max / div;
    base[3] = det.box.y_max / div;
    base[4] = det.kind == LesionKind::EX ? 1.0 : 0.0;
    base[5] = det.kind == LesionKind::MA ? 1.0 : 0.0;
    if (cfg.include_score) base[6] = det.score;
    return base;
}

}  // namespace

std::vector<double> encode_mask(const BinaryMask& mask, const BoundingBox& box,
                                const MaskEncoderParams& enc, int crop_size) {
    if (!mask.any()) throw DegenerateInputError("encode_mask on an empty mask");
    return mask_encoder_forward(enc, crop_to_box(mask, box, crop_size));
}

std::vector<double> encode_detection(const Detection& det, const EncoderConfig& cfg,
                                     const MaskEncoderParams& enc) {
    cfg.check();
    std::vector<double> base = base_features(det, cfg);
    if (!cfg.use_masks) return base;
    if (!det.mask) throw ValidationError("use_masks is set but the detection has no mask");
    std::vector<double> branch = encode_mask(*det.mask, det.box, enc, cfg.mask_crop_size);
    if (cfg.combine == MaskCombine::Add) {
        for (int k = 0; k < cfg.feature_dim; ++k)
            base[static_cast<std::size_t>(k)] += branch[static_cast<std::size_t>(k)];
        return base;
    }
    base.insert(base.end(), branch.begin(), branch.end());
    return base;
}

FeatureSequence build_sequence(const DetectionSet& dets, const EncoderConfig& cfg) {
    cfg.check();
    FeatureSequence seq;
    seq.image_id = dets.image_id;
    seq.feature_dim = cfg.feature_dim;

    std::vector<const Detection*> ordered;
    ordered.reserve(dets.detections.size());
    for (const auto& det : dets.detections) ordered.push_back(&det);
    std::sort(ordered.begin(), ordered.end(), [](const Detection* a, const Detection* b) {
        return std::tuple(a->box.y_min, a->box.x_min, static_cast<int>(a->kind), a->box.y_max,
                          a->box.x_max) < std::tuple(b->box.y_min, b->box.x_min,
                                                     static_cast<int>(b->kind), b->box.y_max,
                                                     b->box.x_max);
    });

    if (ordered.empty()) {
        // An LSTM needs at least one input; healthy images get one zero step.
        FeatureStep sentinel;
        sentinel.base.assign(static_cast<std::size_t>(cfg.feature_dim), 0.0);
        seq.steps.push_back(std::move(sentinel));
        return seq;
    }
    for (const Detection* det : ordered) {
        FeatureStep step;
        step.base = base_features(*det, cfg);
        if (cfg.use_masks) {
            if (!det->mask)
                throw ValidationError("use_masks is set but a detection in " + dets.image_id +
                                      " has no mask");
            step.crop = crop_to_box(*det->mask, det->box, cfg.mask_crop_size);
        }
        seq.steps.push_back(std::move(step));
    }
    return seq;
}

std::vector<std::vector<double>> materialize_sequence(const FeatureSequence& seq,
                                                      const EncoderConfig& cfg,
                                                      const MaskEncoderParams& enc) {
    std::vector<std::vector<double>> out;
    out.reserve(seq.steps.size());
    for (const auto& step : seq.steps) {
        std::vector<double> v = step.base;
        if (step.crop) {
            std::vector<double> branch = mask_encoder_forward(enc, *step.crop);
            if (cfg.combine == MaskCombine::Add) {
                for (int k = 0; k < cfg.feature_dim; ++k)
                    v[static_cast<std::size_t>(k)] += branch[static_cast<std::size_t>(k)];
            } else {
                v.insert(v.end(), branch.begin(), branch.end());
            }
        } else if (cfg.use_masks && cfg.combine == MaskCombine::Concat) {
            v.resize(static_cast<std::size_t>(2 * cfg.feature_dim), 0.0);
        }
        for (double x : v)
            if (!std::isfinite(x)) throw NumericError("non-finite feature value");
        out.push_back(std::move(v));
    }
    return out;
}

std::string serialize_sequences(const std::vector<FeatureSequence>& seqs, const EncoderConfig& cfg,
                                const MaskEncoderParams& enc) {
    std::ostringstream out;
    for (const auto& seq : seqs) {
        json o;
        o["image_id"] = seq.image_id;
        o["steps"] = materialize_sequence(seq, cfg, enc);
        out << o.dump() << "\n";
    }
    return out.str();
}

}  // namespace lesionkit
