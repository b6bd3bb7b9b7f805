#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lesionkit/core.hpp"

namespace lesionkit {

struct MaskEncoderParams;  // neural.hpp

enum class MaskCombine { Add, Concat };

struct EncoderConfig {
    bool use_masks = false;
    bool normalize_boxes = true;
    int image_size = 1024;
    int mask_crop_size = 32;
    int feature_dim = 6;  // 4 box coords + 2-way one-hot
    bool include_score = false;
    MaskCombine combine = MaskCombine::Add;

    void check() const;
    // LSTM input width implied by this configuration.
    int input_dim() const {
        return use_masks && combine == MaskCombine::Concat ? 2 * feature_dim : feature_dim;
    }
};

// One timestep: the weight-free base features plus, when masks are in play,
// the crop the mask branch consumes. The branch output depends on the model
// weights, so it is computed inside the model rather than frozen here.
struct FeatureStep {
    std::vector<double> base;
    std::optional<std::vector<double>> crop;  // mask_crop_size^2 values in {0,1}
};

struct FeatureSequence {
    std::string image_id;
    int feature_dim = 0;
    std::vector<FeatureStep> steps;
};

// Box coordinates (optionally divided by image_size) + one-hot kind, padded to
// feature_dim. With use_masks the projected mask branch is folded in according
// to cfg.combine; this is the materialized vector the model would feed its
// LSTM for this detection.
std::vector<double> encode_detection(const Detection& det, const EncoderConfig& cfg,
                                     const MaskEncoderParams& enc);

// Crop-to-box, nearest-neighbor resample to mask_crop_size, three stages of
// [conv -> tanh -> 2x2 max-pool], flatten, dense projection to feature_dim.
std::vector<double> encode_mask(const BinaryMask& mask, const BoundingBox& box,
                                const MaskEncoderParams& enc, int crop_size);

// The raw crop fed to the mask branch; exposed so sequences can be rebuilt
// under changing weights during training.
std::vector<double> crop_to_box(const BinaryMask& mask, const BoundingBox& box, int crop_size);

// Detections ordered by (y_min, x_min, kind); empty sets produce one all-zero
// sentinel step.
FeatureSequence build_sequence(const DetectionSet& dets, const EncoderConfig& cfg);

// Feature vectors as the model would see them given `enc` weights.
std::vector<std::vector<double>> materialize_sequence(const FeatureSequence& seq,
                                                      const EncoderConfig& cfg,
                                                      const MaskEncoderParams& enc);

std::string serialize_sequences(const std::vector<FeatureSequence>& seqs, const EncoderConfig& cfg,
                                const MaskEncoderParams& enc);

}  // namespace lesionkit
