#include "lesionkit/segmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace lesionkit {

double iou_box(const BoundingBox& a, const BoundingBox& b) {
    if (!a.valid() || !b.valid()) throw ValidationError("iou_box on an invalid box");
    long long ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    long long iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    long long inter = ix * iy;
    long long uni = a.area() + b.area() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double iou_mask(const BinaryMask& a, const BinaryMask& b) {
    std::size_t uni = BinaryMask::union_count(a, b);
    if (uni == 0) throw UndefinedMetricError("iou_mask of two empty masks");
    std::size_t inter = BinaryMask::intersection_count(a, b);
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

double pair_iou(const Detection& pred, const Detection& gt, bool use_masks) {
    if (use_masks && pred.mask && gt.mask) return iou_mask(*pred.mask, *gt.mask);
    return iou_box(pred.box, gt.box);
}

// Prediction sweep order: score desc, then best achievable IOU desc, then
// input index. `best` holds each prediction's max IOU over same-kind gts.
std::vector<int> sweep_order(const DetectionSet& preds, const std::vector<double>& best) {
    std::vector<int> order(preds.detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (preds.detections[a].score != preds.detections[b].score)
            return preds.detections[a].score > preds.detections[b].score;
        return best[a] > best[b];
    });
    return order;
}

}  // namespace

MatchResult match_detections(const DetectionSet& preds, const DetectionSet& gts, double threshold,
                             bool use_masks) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw ValidationError("match threshold must be in (0,1]");
    std::size_t np = preds.detections.size(), ng = gts.detections.size();
    std::vector<std::vector<double>> iou(np, std::vector<double>(ng, -1.0));
    std::vector<double> best(np, -1.0);
    for (std::size_t p = 0; p < np; ++p)
        for (std::size_t g = 0; g < ng; ++g) {
            if (preds.detections[p].kind != gts.detections[g].kind) continue;
            iou[p][g] = pair_iou(preds.detections[p], gts.detections[g], use_masks);
            best[p] = std::max(best[p], iou[p][g]);
        }

    MatchResult result;
    result.threshold = threshold;
    std::vector<bool> gt_taken(ng, false), pred_matched(np, false);
    for (int p : sweep_order(preds, best)) {
        int chosen = -1;
        double chosen_iou = -1.0;
        for (std::size_t g = 0; g < ng; ++g) {
            if (gt_taken[g] || iou[p][g] < threshold) continue;
            if (iou[p][g] > chosen_iou) {
                chosen_iou = iou[p][g];
                chosen = static_cast<int>(g);
            }
        }
        if (chosen >= 0) {
            gt_taken[chosen] = true;
            pred_matched[p] = true;
            result.pairs.push_back({p, chosen, chosen_iou});
        }
    }
    for (std::size_t p = 0; p < np; ++p)
        if (!pred_matched[p]) result.unmatched_predictions.push_back(static_cast<int>(p));
    for (std::size_t g = 0; g < ng; ++g)
        if (!gt_taken[g]) result.unmatched_gts.push_back(static_cast<int>(g));
    return result;
}

std::optional<double> average_precision(const DetectionSet& preds, const DetectionSet& gts,
                                        double threshold, bool use_masks) {
    std::size_t ng = gts.detections.size();
    if (ng == 0) return std::nullopt;
    if (preds.detections.empty()) return 0.0;

    MatchResult match = match_detections(preds, gts, threshold, use_masks);
    std::vector<bool> is_tp(preds.detections.size(), false);
    for (const auto& pair : match.pairs) is_tp[static_cast<std::size_t>(pair.prediction)] = true;

    // Re-derive the sweep to score ranks in the same deterministic order.
    std::vector<double> best(preds.detections.size(), -1.0);
    for (std::size_t p = 0; p < preds.detections.size(); ++p)
        for (std::size_t g = 0; g < ng; ++g)
            if (preds.detections[p].kind == gts.detections[g].kind)
                best[p] = std::max(best[p], pair_iou(preds.detections[p], gts.detections[g], use_masks));
    std::vector<int> order = sweep_order(preds, best);

    std::size_t n = order.size();
    std::vector<double> precision(n);
    std::vector<bool> tp_rank(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp_rank[k] = is_tp[static_cast<std::size_t>(order[k])];
        if (tp_rank[k]) ++tp;
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    }
    // Monotone interpolation: precision at a rank becomes the max at or after it.
    for (std::size_t k = n - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);

    double delta_recall = 1.0 / static_cast<double>(ng);
    double ap = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (tp_rank[k]) ap += precision[k] * delta_recall;
    return ap;
}

double mean_average_precision(const std::vector<std::pair<DetectionSet, DetectionSet>>& results,
                              double threshold, bool use_masks) {
    double sum = 0.0;
    std::size_t eligible = 0;
    for (const auto& [preds, gts] : results) {
        auto ap = average_precision(preds, gts, threshold, use_masks);
        if (!ap) continue;
        sum += *ap;
        ++eligible;
    }
    if (eligible == 0)
        throw UndefinedMetricError("mAP undefined: no image has ground-truth lesions");
    return sum / static_cast<double>(eligible);
}

long long ConfusionMatrix::total() const {
    long long t = 0;
    for (const auto& row : counts_)
        for (long long v : row) t += v;
    return t;
}

long long ConfusionMatrix::trace() const {
    return counts_[0][0] + counts_[1][1] + counts_[2][2];
}

double accuracy(const ConfusionMatrix& cm) {
    long long total = cm.total();
    if (total <= 0) throw UndefinedMetricError("accuracy of an empty confusion matrix");
    return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

ConfusionMatrix confusion_from_labels(const std::vector<SeverityGrade>& true_labels,
                                      const std::vector<SeverityGrade>& predicted_labels) {
    if (true_labels.size() != predicted_labels.size())
        throw ValidationError("label lists differ in length");
    if (true_labels.empty()) throw ValidationError("label lists are empty");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < true_labels.size(); ++i)
        ++cm.at(true_labels[i], predicted_labels[i]);
    return cm;
}

EvalReport phase1_report(const SplitResults& results, const std::vector<double>& thresholds,
                         bool use_masks) {
    if (results.empty()) throw ConfigError("phase1_report needs at least one split");
    EvalReport report;
    report.thresholds = thresholds;
    for (const auto& [split, pairs] : results) {
        if (pairs.empty()) throw ConfigError(std::string("split ") + to_string(split) + " is empty");
        EvalReport::Row row;
        row.split = split;
        row.images = pairs.size();
        for (const auto& [preds, gts] : pairs) {
            row.detections += preds.detections.size();
            if (!gts.detections.empty()) ++row.images_with_gt;
        }
        for (double t : thresholds) row.map_values.push_back(mean_average_precision(pairs, t, use_masks));
        report.rows.push_back(std::move(row));

        for (const auto& [preds, gts] : pairs) {
            EvalReport::PerImage pi;
            pi.split = split;
            pi.image_id = preds.image_id.empty() ? gts.image_id : preds.image_id;
            for (double t : thresholds) pi.ap.push_back(average_precision(preds, gts, t, use_masks));
            report.per_image.push_back(std::move(pi));
        }
    }
    return report;
}

namespace {

std::string threshold_header(double t) {
    // Table headers keep the percent-style names (mAP_35) while flags and
    // records use decimal fractions.
    int pct = static_cast<int>(std::lround(t * 100));
    return "mAP_" + std::to_string(pct);
}

}  // namespace

std::string render_report_text(const EvalReport& report) {
    std::ostringstream out;
    out << "split        images  with_gt  detections";
    for (double t : report.thresholds) out << "  " << threshold_header(t);
    out << "\n";
    for (const auto& row : report.rows) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-12s %6zu  %7zu  %10zu", to_string(row.split),
                      row.images, row.images_with_gt, row.detections);
        out << line;
        for (double v : row.map_values) out << "  " << format_fixed4(v);
        out << "\n";
    }
    return out.str();
}

std::string render_report_json(const EvalReport& report) {
    json doc;
    doc["thresholds"] = report.thresholds;
    doc["rows"] = json::array();
    for (const auto& row : report.rows) {
        json r;
        r["split"] = to_string(row.split);
        r["images"] = row.images;
        r["images_with_gt"] = row.images_with_gt;
        r["detections"] = row.detections;
        json values = json::array();
        for (double v : row.map_values) values.push_back(json::parse(format_fixed4(v)));
        r["map"] = values;
        doc["rows"].push_back(std::move(r));
    }
    return doc.dump(2) + "\n";
}

std::string render_per_image_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "split,image_id";
    for (double t : report.thresholds) out << ",ap_" << static_cast<int>(std::lround(t * 100));
    out << "\n";
    for (const auto& pi : report.per_image) {
        out << to_string(pi.split) << "," << pi.image_id;
        for (const auto& ap : pi.ap) out << "," << (ap ? format_fixed4(*ap) : std::string(""));
        out << "\n";
    }
    return out.str();
}

std::string render_confusion_text(const ConfusionMatrix& cm, double acc) {
    std::ostringstream out;
    out << "accuracy " << format_fixed4(acc) << "\n";
    out << "true\\pred  healthy   medium   severe\n";
    const char* names[3] = {"healthy", "medium", "severe"};
    for (int t = 0; t < 3; ++t) {
        char line[120];
        std::snprintf(line, sizeof(line), "%-9s %8lld %8lld %8lld", names[t],
                      static_cast<long long>(cm.at(t, 0)), static_cast<long long>(cm.at(t, 1)),
                      static_cast<long long>(cm.at(t, 2)));
        out << line << "\n";
    }
    return out.str();
}

}  // namespace lesionkit
