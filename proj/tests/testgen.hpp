#pragma once

// Randomized detection-set instances shared by the metric property tests and
// the acceptance suite. Small canvases, few detections, deliberate score ties.

#include "lesionkit/common.hpp"
#include "lesionkit/core.hpp"

namespace lesionkit::testgen {

inline BinaryMask random_blob(Rng& rng, int canvas_w, int canvas_h) {
    BinaryMask mask(canvas_w, canvas_h);
    int w = rng.uniform_int(1, std::min(10, canvas_w));
    int h = rng.uniform_int(1, std::min(10, canvas_h));
    int x0 = rng.uniform_int(0, canvas_w - w);
    int y0 = rng.uniform_int(0, canvas_h - h);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x)
            if (rng.next_double() < 0.7) mask.set(x, y);
    if (!mask.any()) mask.set(x0, y0);
    return mask;
}

inline BoundingBox random_box(Rng& rng, int canvas_w, int canvas_h) {
    int w = rng.uniform_int(1, std::min(12, canvas_w));
    int h = rng.uniform_int(1, std::min(12, canvas_h));
    int x0 = rng.uniform_int(0, canvas_w - w);
    int y0 = rng.uniform_int(0, canvas_h - h);
    return BoundingBox{x0, y0, x0 + w, y0 + h};
}

inline double quantized_score(Rng& rng) {
    // Coarse grid so equal scores occur and tie-breaking is exercised.
    return rng.uniform_int(0, 20) / 20.0;
}

inline Detection random_detection(Rng& rng, int canvas_w, int canvas_h) {
    LesionKind kind = rng.next_double() < 0.5 ? LesionKind::EX : LesionKind::MA;
    double score = quantized_score(rng);
    if (rng.next_double() < 0.7)
        return Detection::make(kind, score, {}, random_blob(rng, canvas_w, canvas_h));
    return Detection::make(kind, score, random_box(rng, canvas_w, canvas_h));
}

inline Detection perturbed_copy(Rng& rng, const Detection& gt, int canvas_w, int canvas_h) {
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    BoundingBox b = gt.box;
    b.x_min = clampi(b.x_min + rng.uniform_int(-2, 2), 0, canvas_w - 1);
    b.y_min = clampi(b.y_min + rng.uniform_int(-2, 2), 0, canvas_h - 1);
    b.x_max = clampi(b.x_max + rng.uniform_int(-2, 2), b.x_min + 1, canvas_w);
    b.y_max = clampi(b.y_max + rng.uniform_int(-2, 2), b.y_min + 1, canvas_h);
    double score = quantized_score(rng);
    if (gt.mask && rng.next_double() < 0.8) {
        BinaryMask m(canvas_w, canvas_h);
        int dx = rng.uniform_int(-1, 1), dy = rng.uniform_int(-1, 1);
        for (int y = 0; y < canvas_h; ++y)
            for (int x = 0; x < canvas_w; ++x) {
                int sx = x - dx, sy = y - dy;
                if (sx >= 0 && sy >= 0 && sx < canvas_w && sy < canvas_h && gt.mask->get(sx, sy))
                    m.set(x, y);
            }
        if (m.any()) return Detection::make(gt.kind, score, {}, std::move(m));
    }
    return Detection::make(gt.kind, score, b);
}

struct EvalInstance {
    DetectionSet preds;
    DetectionSet gts;
};

inline EvalInstance random_eval_instance(Rng& rng, int index) {
    int w = rng.uniform_int(16, 64);
    int h = rng.uniform_int(16, 64);
    EvalInstance inst;
    inst.gts.image_id = "case_" + std::to_string(index);
    inst.preds.image_id = inst.gts.image_id;
    int n_gt = rng.next_double() < 0.1 ? 0 : rng.uniform_int(1, 6);
    for (int k = 0; k < n_gt; ++k)
        inst.gts.detections.push_back(random_detection(rng, w, h));
    for (const auto& gt : inst.gts.detections)
        if (rng.next_double() < 0.8)
            inst.preds.detections.push_back(perturbed_copy(rng, gt, w, h));
    int extras = rng.uniform_int(0, 3);
    for (int k = 0; k < extras; ++k)
        inst.preds.detections.push_back(random_detection(rng, w, h));
    return inst;
}

}  // namespace lesionkit::testgen
