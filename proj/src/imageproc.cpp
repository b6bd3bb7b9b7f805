#include "lesionkit/imageproc.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace lesionkit {

namespace {

constexpr double kDiscInset = 0.98;
constexpr double kDiscDetectFraction = 0.05;

void gaussian_kernel(double radius_px, std::vector<double>& kernel) {
    double sigma = std::max(0.5, radius_px / 3.0);
    int half = std::max(1, static_cast<int>(std::ceil(radius_px)));
    kernel.assign(static_cast<std::size_t>(2 * half + 1), 0.0);
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + half)] = w;
        sum += w;
    }
    for (auto& w : kernel) w /= sum;
}

// Separable convolution with zero padding outside the frame.
void blur_inplace(std::vector<double>& buf, int width, int height,
                  const std::vector<double>& kernel) {
    int half = static_cast<int>(kernel.size() / 2);
    std::vector<double> tmp(buf.size());
    for (int y = 0; y < height; ++y) {
        const double* row = buf.data() + static_cast<std::size_t>(y) * width;
        double* out = tmp.data() + static_cast<std::size_t>(y) * width;
        for (int x = 0; x < width; ++x) {
            double acc = 0.0;
            int lo = std::max(-half, -x), hi = std::min(half, width - 1 - x);
            for (int k = lo; k <= hi; ++k) acc += kernel[static_cast<std::size_t>(k + half)] * row[x + k];
            out[x] = acc;
        }
    }
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) {
            double acc = 0.0;
            int lo = std::max(-half, -y), hi = std::min(half, height - 1 - y);
            for (int k = lo; k <= hi; ++k)
                acc += kernel[static_cast<std::size_t>(k + half)] *
                       tmp[static_cast<std::size_t>(y + k) * width + x];
            buf[static_cast<std::size_t>(y) * width + x] = acc;
        }
    }
}

struct Component {
    std::vector<int> pixels;  // flat indices
    BoundingBox box;
};

std::vector<Component> connected_components(const BinaryMask& mask) {
    int w = mask.width(), h = mask.height();
    std::vector<bool> seen(static_cast<std::size_t>(w) * h, false);
    std::vector<Component> comps;
    std::vector<int> stack;
    for (int y0 = 0; y0 < h; ++y0) {
        for (int x0 = 0; x0 < w; ++x0) {
            std::size_t start = static_cast<std::size_t>(y0) * w + x0;
            if (seen[start] || !mask.get(x0, y0)) continue;
            Component comp;
            comp.box = {x0, y0, x0 + 1, y0 + 1};
            stack.push_back(static_cast<int>(start));
            seen[start] = true;
            while (!stack.empty()) {
                int idx = stack.back();
                stack.pop_back();
                comp.pixels.push_back(idx);
                int x = idx % w, y = idx / w;
                comp.box.x_min = std::min(comp.box.x_min, x);
                comp.box.y_min = std::min(comp.box.y_min, y);
                comp.box.x_max = std::max(comp.box.x_max, x + 1);
                comp.box.y_max = std::max(comp.box.y_max, y + 1);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int nx = x + dx, ny = y + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        std::size_t nidx = static_cast<std::size_t>(ny) * w + nx;
                        if (!seen[nidx] && mask.get(nx, ny)) {
                            seen[nidx] = true;
                            stack.push_back(static_cast<int>(nidx));
                        }
                    }
            }
            comps.push_back(std::move(comp));
        }
    }
    return comps;
}

void draw_box_perimeter(FundusImage& img, const BoundingBox& b, float r, float g, float bch) {
    for (int x = b.x_min; x < b.x_max; ++x) {
        for (int y : {b.y_min, b.y_max - 1}) {
            img.at(x, y, 0) = r;
            img.at(x, y, 1) = g;
            img.at(x, y, 2) = bch;
        }
    }
    for (int y = b.y_min + 1; y < b.y_max - 1; ++y) {
        for (int x : {b.x_min, b.x_max - 1}) {
            img.at(x, y, 0) = r;
            img.at(x, y, 1) = g;
            img.at(x, y, 2) = bch;
        }
    }
}

void blend_mask(FundusImage& img, const BinaryMask& mask, float r, float g, float b) {
    const float color[3] = {r, g, b};
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask.get(x, y))
                for (int c = 0; c < 3; ++c)
                    img.at(x, y, c) = 0.5f * img.at(x, y, c) + 0.5f * color[c];
}

void draw_set(FundusImage& img, const DetectionSet& set, bool ground_truth) {
    for (const auto& det : set.detections) {
        if (det.box.x_min < 0 || det.box.y_min < 0 || det.box.x_max > img.width ||
            det.box.y_max > img.height)
            throw ValidationError("detection box outside image bounds for " + set.image_id);
        float r, g, b;
        if (det.kind == LesionKind::EX) {
            r = ground_truth ? 0.0f : 1.0f;
            g = ground_truth ? 1.0f : 0.0f;
            b = 0.0f;
        } else {
            r = 0.0f;
            g = 0.0f;
            b = ground_truth ? 1.0f : 0.0f;
        }
        if (det.mask) {
            if (det.mask->width() != img.width || det.mask->height() != img.height)
                throw ValidationError("detection mask dimensions differ from image");
            blend_mask(img, *det.mask, r, g, b);
        }
        draw_box_perimeter(img, det.box, r, g, b);
    }
}

}  // namespace

void PreprocessParams::check() const {
    if (target_size < 16) throw ValidationError("target_size must be >= 16");
    if (dilation_kernel < 1 || dilation_kernel % 2 == 0)
        throw ValidationError("dilation_kernel must be odd and >= 1");
    if (dilation_iterations < 0) throw ValidationError("dilation_iterations must be >= 0");
    if (contrast_blur_radius <= 0.0) throw ValidationError("contrast_blur_radius must be > 0");
}

double NormalizeTransform::out_radius() const { return kDiscInset * target_size * 0.5; }

// The crop sits a couple of pixels inside the mapped disc edge: resampling
// mixes background into the outermost ring, which would otherwise survive as
// a dark rim artifact.
double NormalizeTransform::crop_radius() const {
    return out_radius() - std::max(2.0, 0.01 * target_size);
}

std::vector<double> masked_gaussian_mean(const std::vector<double>& values,
                                         const std::vector<double>& weight, int width, int height,
                                         double radius_px) {
    std::vector<double> kernel;
    gaussian_kernel(radius_px, kernel);
    std::vector<double> num(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) num[i] = values[i] * weight[i];
    std::vector<double> den = weight;
    blur_inplace(num, width, height, kernel);
    blur_inplace(den, width, height, kernel);
    std::vector<double> mean(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i)
        if (den[i] > 1e-12) mean[i] = num[i] / den[i];
    return mean;
}

NormalizeTransform compute_normalization(const FundusImage& img, const PreprocessParams& p) {
    p.check();
    float red_max = 0.0f;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) red_max = std::max(red_max, img.at(x, y, 0));
    double threshold = kDiscDetectFraction * red_max;
    BinaryMask above(img.width, img.height);
    bool any = false;
    if (red_max > 0.0f) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                if (img.at(x, y, 0) >= threshold && img.at(x, y, 0) > 0.0f) {
                    above.set(x, y);
                    any = true;
                }
    }
    if (!any) throw DegenerateInputError("no retina disc detected in " + img.id);

    auto comps = connected_components(above);
    const Component* best = &comps.front();
    for (const auto& c : comps)
        if (c.pixels.size() > best->pixels.size()) best = &c;

    double cx = 0.0, cy = 0.0;
    for (int idx : best->pixels) {
        cx += (idx % img.width) + 0.5;
        cy += (idx / img.width) + 0.5;
    }
    cx /= static_cast<double>(best->pixels.size());
    cy /= static_cast<double>(best->pixels.size());
    double r2 = 0.0;
    for (int idx : best->pixels) {
        double dx = (idx % img.width) + 0.5 - cx;
        double dy = (idx / img.width) + 0.5 - cy;
        r2 = std::max(r2, dx * dx + dy * dy);
    }
    NormalizeTransform t;
    t.in_cx = cx;
    t.in_cy = cy;
    t.in_radius = std::sqrt(r2) + 0.5;
    t.target_size = p.target_size;
    t.circular_crop = p.circular_crop;
    t.gain = p.contrast_gain;
    t.blur_radius_px = p.contrast_blur_radius * p.target_size;
    return t;
}

FundusImage apply_normalization(const FundusImage& img, const NormalizeTransform& t) {
    int n = t.target_size;
    FundusImage out(img.id, n, n);
    double oc = t.out_center();
    double inv_scale = 1.0 / t.scale();

    // Geometry: bilinear resample mapping the detected disc onto the output circle.
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double sx = t.in_cx + ((x + 0.5) - oc) * inv_scale - 0.5;
            double sy = t.in_cy + ((y + 0.5) - oc) * inv_scale - 0.5;
            int x0 = static_cast<int>(std::floor(sx));
            int y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            for (int c = 0; c < 3; ++c) {
                auto sample = [&](int xi, int yi) -> double {
                    if (xi < 0 || yi < 0 || xi >= img.width || yi >= img.height) return 0.0;
                    return img.at(xi, yi, c);
                };
                double v = (1 - fx) * (1 - fy) * sample(x0, y0) + fx * (1 - fy) * sample(x0 + 1, y0) +
                           (1 - fx) * fy * sample(x0, y0 + 1) + fx * fy * sample(x0 + 1, y0 + 1);
                out.at(x, y, c) = static_cast<float>(v);
            }
        }
    }

    // Photometry: local-mean subtraction recentered at 0.5, weighted by the
    // output circle so the disc rim does not bleed into the mean.
    std::vector<double> weight(static_cast<std::size_t>(n) * n, 1.0);
    double rlim = t.crop_radius();
    if (t.circular_crop) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double dx = (x + 0.5) - oc, dy = (y + 0.5) - oc;
                weight[static_cast<std::size_t>(y) * n + x] =
                    (dx * dx + dy * dy <= rlim * rlim) ? 1.0 : 0.0;
            }
    }
    std::vector<double> channel(static_cast<std::size_t>(n) * n);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                channel[static_cast<std::size_t>(y) * n + x] = out.at(x, y, c);
        auto mean = masked_gaussian_mean(channel, weight, n, n, t.blur_radius_px);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                std::size_t i = static_cast<std::size_t>(y) * n + x;
                double v = 0.0;
                if (weight[i] > 0.0)
                    v = std::clamp(t.gain * (channel[i] - mean[i]) + 0.5, 0.0, 1.0);
                out.at(x, y, c) = static_cast<float>(v);
            }
    }
    return out;
}

BinaryMask apply_normalization(const BinaryMask& mask, const NormalizeTransform& t) {
    int n = t.target_size;
    BinaryMask out(n, n);
    double oc = t.out_center();
    double inv_scale = 1.0 / t.scale();
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            int sx = static_cast<int>(std::lround(t.in_cx + ((x + 0.5) - oc) * inv_scale - 0.5));
            int sy = static_cast<int>(std::lround(t.in_cy + ((y + 0.5) - oc) * inv_scale - 0.5));
            if (sx >= 0 && sy >= 0 && sx < mask.width() && sy < mask.height() && mask.get(sx, sy))
                out.set(x, y);
        }
    }
    return out;
}

FundusImage normalize_image(const FundusImage& img, const PreprocessParams& p) {
    return apply_normalization(img, compute_normalization(img, p));
}

BinaryMask dilate_mask(const BinaryMask& mask, int kernel, int iterations) {
    if (kernel < 1 || kernel % 2 == 0)
        throw ValidationError("dilation kernel must be odd and >= 1, got " + std::to_string(kernel));
    if (iterations < 0) throw ValidationError("dilation iterations must be >= 0");
    int half = kernel / 2;
    int w = mask.width(), h = mask.height();
    BinaryMask cur = mask;
    for (int it = 0; it < iterations && half > 0; ++it) {
        // Horizontal pass then vertical pass with a sliding set-bit count.
        BinaryMask horiz(w, h);
        for (int y = 0; y < h; ++y) {
            int inside = 0;
            for (int x = -half; x < w; ++x) {
                int enter = x + half;
                if (enter < w && cur.get(enter, y)) ++inside;
                int leave = x - half - 1;
                if (leave >= 0 && cur.get(leave, y)) --inside;
                if (x >= 0 && inside > 0) horiz.set(x, y);
            }
        }
        BinaryMask next(w, h);
        for (int x = 0; x < w; ++x) {
            int inside = 0;
            for (int y = -half; y < h; ++y) {
                int enter = y + half;
                if (enter < h && horiz.get(x, enter)) ++inside;
                int leave = y - half - 1;
                if (leave >= 0 && horiz.get(x, leave)) --inside;
                if (y >= 0 && inside > 0) next.set(x, y);
            }
        }
        cur = std::move(next);
    }
    return cur;
}

std::vector<Instance> split_instances(const BinaryMask& mask, LesionKind kind) {
    std::vector<Instance> out;
    for (auto& comp : connected_components(mask)) {
        BinaryMask m(mask.width(), mask.height());
        for (int idx : comp.pixels) m.set(idx % mask.width(), idx / mask.width());
        out.push_back(Instance{std::move(m), comp.box, kind});
    }
    std::sort(out.begin(), out.end(), [](const Instance& a, const Instance& b) {
        return std::tuple(a.box.y_min, a.box.x_min, a.box.y_max, a.box.x_max) <
               std::tuple(b.box.y_min, b.box.x_min, b.box.y_max, b.box.x_max);
    });
    return out;
}

FundusImage render_overlay(const FundusImage& img, const DetectionSet& dets,
                           const DetectionSet* gts) {
    FundusImage out = img;
    if (gts) draw_set(out, *gts, true);
    draw_set(out, dets, false);
    return out;
}

}  // namespace lesionkit
