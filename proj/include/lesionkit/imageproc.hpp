#pragma once

#include <tuple>
#include <vector>

#include "lesionkit/core.hpp"

namespace lesionkit {

struct PreprocessParams {
    int target_size = 1024;
    int dilation_kernel = 5;
    int dilation_iterations = 2;
    double contrast_blur_radius = 0.1;  // fraction of output width
    double contrast_gain = 4.0;
    bool circular_crop = true;
    bool dilate_both_kinds = false;  // default dilates MA masks only

    void check() const;
};

// Geometry + photometric parameters resolved for one input image. The same
// transform must be applied to the image and to every mask annotating it.
struct NormalizeTransform {
    double in_cx = 0.0;
    double in_cy = 0.0;
    double in_radius = 0.0;
    int target_size = 0;
    bool circular_crop = true;
    double gain = 1.0;
    double blur_radius_px = 1.0;

    double out_center() const { return target_size * 0.5; }
    double out_radius() const;
    double crop_radius() const;
    double scale() const { return out_radius() / in_radius; }
};

// Retina disc found by thresholding the red channel at 5% of its maximum and
// taking the largest connected component. Throws DegenerateInputError when no
// pixel clears the threshold.
NormalizeTransform compute_normalization(const FundusImage& img, const PreprocessParams& p);

FundusImage apply_normalization(const FundusImage& img, const NormalizeTransform& t);
BinaryMask apply_normalization(const BinaryMask& mask, const NormalizeTransform& t);

FundusImage normalize_image(const FundusImage& img, const PreprocessParams& p);

// Square structuring element of side `kernel` (odd), applied `iterations`
// times. Even kernels are rejected.
BinaryMask dilate_mask(const BinaryMask& mask, int kernel, int iterations);

struct Instance {
    BinaryMask mask;
    BoundingBox box;
    LesionKind kind;
};

// 8-connected components, sorted by (y_min, x_min) of their boxes.
std::vector<Instance> split_instances(const BinaryMask& mask, LesionKind kind);

// Box perimeters in solid color (predictions: EX red, MA black; ground truth:
// EX green, MA blue); mask bits blended 0.5*original + 0.5*color.
FundusImage render_overlay(const FundusImage& img, const DetectionSet& dets,
                           const DetectionSet* gts = nullptr);

// Normalized Gaussian blur of `values` where `weight` is 0/1: returns
// blur(values*weight)/blur(weight). Exposed for the blob detector and tests.
std::vector<double> masked_gaussian_mean(const std::vector<double>& values,
                                         const std::vector<double>& weight, int width, int height,
                                         double radius_px);

}  // namespace lesionkit
