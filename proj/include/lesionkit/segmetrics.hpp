#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lesionkit/core.hpp"

namespace lesionkit {

double iou_box(const BoundingBox& a, const BoundingBox& b);

// Throws UndefinedMetricError when both masks are empty.
double iou_mask(const BinaryMask& a, const BinaryMask& b);

struct MatchPair {
    int prediction;
    int ground_truth;
    double iou;
};

struct MatchResult {
    std::vector<MatchPair> pairs;
    std::vector<int> unmatched_predictions;
    std::vector<int> unmatched_gts;
    double threshold = 0.0;
};

// Greedy score-ordered matching. Predictions claim their highest-IOU unclaimed
// ground truth of the same kind with iou >= threshold. Ties: equal scores sort
// by larger best IOU first, then input order; equal IOU claims the lower
// ground-truth index. Masks are compared when use_masks is set and both sides
// carry one, otherwise boxes.
MatchResult match_detections(const DetectionSet& preds, const DetectionSet& gts, double threshold,
                             bool use_masks);

// Area under the monotone-interpolated precision-recall curve over the
// score-ordered sweep. Empty ground truth yields nullopt (the image is skipped
// by mAP, not scored).
std::optional<double> average_precision(const DetectionSet& preds, const DetectionSet& gts,
                                        double threshold, bool use_masks = true);

// Arithmetic mean of per-image AP over images with at least one ground truth.
// Throws UndefinedMetricError when no image qualifies.
double mean_average_precision(const std::vector<std::pair<DetectionSet, DetectionSet>>& results,
                              double threshold, bool use_masks = true);

class ConfusionMatrix {
public:
    long long& at(SeverityGrade truth, SeverityGrade predicted) {
        return counts_[grade_index(truth)][grade_index(predicted)];
    }
    long long at(SeverityGrade truth, SeverityGrade predicted) const {
        return counts_[grade_index(truth)][grade_index(predicted)];
    }
    long long& at(int truth, int predicted) { return counts_[truth][predicted]; }
    long long at(int truth, int predicted) const { return counts_[truth][predicted]; }

    long long total() const;
    long long trace() const;

    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::array<std::array<long long, 3>, 3> counts_{};
};

// trace / total; throws UndefinedMetricError on an empty matrix.
double accuracy(const ConfusionMatrix& cm);

ConfusionMatrix confusion_from_labels(const std::vector<SeverityGrade>& true_labels,
                                      const std::vector<SeverityGrade>& predicted_labels);

struct EvalReport {
    std::vector<double> thresholds;

    struct Row {
        Split split;
        std::vector<double> map_values;  // one per threshold
        std::size_t images = 0;
        std::size_t images_with_gt = 0;
        std::size_t detections = 0;
    };
    std::vector<Row> rows;

    struct PerImage {
        Split split;
        std::string image_id;
        std::vector<std::optional<double>> ap;  // one per threshold
    };
    std::vector<PerImage> per_image;
};

using SplitResults = std::map<Split, std::vector<std::pair<DetectionSet, DetectionSet>>>;

EvalReport phase1_report(const SplitResults& results,
                         const std::vector<double>& thresholds = {0.35, 0.50, 0.75},
                         bool use_masks = true);

std::string render_report_text(const EvalReport& report);
std::string render_report_json(const EvalReport& report);
std::string render_per_image_csv(const EvalReport& report);

std::string render_confusion_text(const ConfusionMatrix& cm, double acc);

}  // namespace lesionkit
