#include "oracle.hpp"

#include <algorithm>
#include <deque>

namespace lesionkit::oracle {

double iou_box_bruteforce(const BoundingBox& a, const BoundingBox& b) {
    int x_hi = std::max(a.x_max, b.x_max), y_hi = std::max(a.y_max, b.y_max);
    long long inter = 0, uni = 0;
    for (int y = 0; y < y_hi; ++y)
        for (int x = 0; x < x_hi; ++x) {
            bool in_a = x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max;
            bool in_b = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
            if (in_a && in_b) ++inter;
            if (in_a || in_b) ++uni;
        }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double iou_mask_bruteforce(const BinaryMask& a, const BinaryMask& b) {
    long long inter = 0, uni = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            bool in_a = a.get(x, y), in_b = b.get(x, y);
            if (in_a && in_b) ++inter;
            if (in_a || in_b) ++uni;
        }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

double pair_iou_bf(const Detection& pred, const Detection& gt, bool use_masks) {
    if (use_masks && pred.mask && gt.mask) return iou_mask_bruteforce(*pred.mask, *gt.mask);
    return iou_box_bruteforce(pred.box, gt.box);
}

// Sweep order by repeated max-search: highest score, then highest achievable
// IOU, then lowest input index.
std::vector<int> sweep_order_bf(const DetectionSet& preds, const DetectionSet& gts,
                                bool use_masks) {
    std::size_t n = preds.detections.size();
    std::vector<double> best(n, -1.0);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t g = 0; g < gts.detections.size(); ++g)
            if (preds.detections[p].kind == gts.detections[g].kind)
                best[p] = std::max(best[p],
                                   pair_iou_bf(preds.detections[p], gts.detections[g], use_masks));
    std::vector<bool> used(n, false);
    std::vector<int> order;
    for (std::size_t round = 0; round < n; ++round) {
        int pick = -1;
        for (std::size_t p = 0; p < n; ++p) {
            if (used[p]) continue;
            if (pick < 0) {
                pick = static_cast<int>(p);
                continue;
            }
            double sp = preds.detections[p].score, sq = preds.detections[pick].score;
            if (sp > sq || (sp == sq && best[p] > best[pick])) pick = static_cast<int>(p);
        }
        used[static_cast<std::size_t>(pick)] = true;
        order.push_back(pick);
    }
    return order;
}

}  // namespace

std::vector<bool> tp_flags_bruteforce(const DetectionSet& preds, const DetectionSet& gts,
                                      double threshold, bool use_masks) {
    std::vector<int> order = sweep_order_bf(preds, gts, use_masks);
    std::vector<bool> gt_used(gts.detections.size(), false);
    std::vector<bool> flags;
    for (int p : order) {
        int chosen = -1;
        double chosen_iou = -1.0;
        for (std::size_t g = 0; g < gts.detections.size(); ++g) {
            if (gt_used[g]) continue;
            if (preds.detections[static_cast<std::size_t>(p)].kind != gts.detections[g].kind)
                continue;
            double iou = pair_iou_bf(preds.detections[static_cast<std::size_t>(p)],
                                     gts.detections[g], use_masks);
            if (iou < threshold) continue;
            if (iou > chosen_iou) {
                chosen_iou = iou;
                chosen = static_cast<int>(g);
            }
        }
        if (chosen >= 0) gt_used[static_cast<std::size_t>(chosen)] = true;
        flags.push_back(chosen >= 0);
    }
    return flags;
}

std::optional<double> average_precision_bruteforce(const DetectionSet& preds,
                                                   const DetectionSet& gts, double threshold,
                                                   bool use_masks) {
    std::size_t ng = gts.detections.size();
    if (ng == 0) return std::nullopt;
    if (preds.detections.empty()) return 0.0;
    std::vector<bool> flags = tp_flags_bruteforce(preds, gts, threshold, use_masks);
    std::size_t n = flags.size();
    std::vector<double> precision(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (flags[k]) ++tp;
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    }
    for (std::size_t k = n - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
    double delta_recall = 1.0 / static_cast<double>(ng);
    double ap = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (flags[k]) ap += precision[k] * delta_recall;
    return ap;
}

double mean_average_precision_bruteforce(
    const std::vector<std::pair<DetectionSet, DetectionSet>>& results, double threshold,
    bool use_masks) {
    double sum = 0.0;
    std::size_t eligible = 0;
    for (const auto& [preds, gts] : results) {
        auto ap = average_precision_bruteforce(preds, gts, threshold, use_masks);
        if (!ap) continue;
        sum += *ap;
        ++eligible;
    }
    return sum / static_cast<double>(eligible);
}

std::vector<std::vector<int>> flood_fill_components(const BinaryMask& mask) {
    int w = mask.width(), h = mask.height();
    std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
    std::vector<std::vector<int>> comps;
    for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < w; ++x0) {
            if (!mask.get(x0, y0) || label[static_cast<std::size_t>(y0) * w + x0] >= 0) continue;
            int id = static_cast<int>(comps.size());
            comps.emplace_back();
            std::deque<std::pair<int, int>> queue{{x0, y0}};
            label[static_cast<std::size_t>(y0) * w + x0] = id;
            while (!queue.empty()) {
                auto [x, y] = queue.front();
                queue.pop_front();
                comps[static_cast<std::size_t>(id)].push_back(y * w + x);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int nx = x + dx, ny = y + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                        if (mask.get(nx, ny) && label[ni] < 0) {
                            label[ni] = id;
                            queue.push_back({nx, ny});
                        }
                    }
            }
            std::sort(comps[static_cast<std::size_t>(id)].begin(),
                      comps[static_cast<std::size_t>(id)].end());
        }
    return comps;
}

}  // namespace lesionkit::oracle
