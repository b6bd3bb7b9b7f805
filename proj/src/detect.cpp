#include "lesionkit/detect.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "lesionkit/image_io.hpp"
#include "lesionkit/imageproc.hpp"

namespace fs = std::filesystem;

namespace lesionkit {

namespace {

constexpr double kBlobMeanRadiusFraction = 0.08;
constexpr int kPlacementRetries = 100;

struct Ellipse {
    double cx, cy, a, b, cos_t, sin_t;

    bool contains(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        double u = (dx * cos_t + dy * sin_t) / a;
        double v = (-dx * sin_t + dy * cos_t) / b;
        return u * u + v * v <= 1.0;
    }
};

BinaryMask rasterize(const Ellipse& e, int size) {
    BinaryMask mask(size, size);
    int x0 = std::max(0, static_cast<int>(std::floor(e.cx - std::max(e.a, e.b) - 1)));
    int x1 = std::min(size - 1, static_cast<int>(std::ceil(e.cx + std::max(e.a, e.b) + 1)));
    int y0 = std::max(0, static_cast<int>(std::floor(e.cy - std::max(e.a, e.b) - 1)));
    int y1 = std::min(size - 1, static_cast<int>(std::ceil(e.cy + std::max(e.a, e.b) + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (e.contains(x + 0.5, y + 0.5)) mask.set(x, y);
    return mask;
}

}  // namespace

void BlobDetectParams::check() const {
    if (bright_threshold <= 0.0 || dark_threshold <= 0.0)
        throw ValidationError("blob thresholds must be > 0");
    if (min_area < 1 || min_area > max_area)
        throw ValidationError("blob area range must satisfy 0 < min_area <= max_area");
}

std::vector<DetectionSet> ingest_detections(const std::string& path) {
    return load_detections(path);
}

DetectionSet blob_detect(const FundusImage& img, const BlobDetectParams& p) {
    p.check();
    std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    std::vector<double> lum(n), inside(n);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            std::size_t i = static_cast<std::size_t>(y) * img.width + x;
            double r = img.at(x, y, 0), g = img.at(x, y, 1), b = img.at(x, y, 2);
            lum[i] = (r + g + b) / 3.0;
            inside[i] = (r > 0.0f || g > 0.0f || b > 0.0f) ? 1.0 : 0.0;
        }
    auto mean = masked_gaussian_mean(lum, inside, img.width, img.height,
                                     kBlobMeanRadiusFraction * img.width);

    BinaryMask bright(img.width, img.height), dark(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            std::size_t i = static_cast<std::size_t>(y) * img.width + x;
            if (inside[i] == 0.0) continue;
            double excess = lum[i] - mean[i];
            if (excess > p.bright_threshold) bright.set(x, y);
            if (-excess > p.dark_threshold) dark.set(x, y);
        }

    DetectionSet out;
    out.image_id = img.id;
    auto harvest = [&](const BinaryMask& field, LesionKind kind) {
        for (auto& inst : split_instances(field, kind)) {
            auto area = inst.mask.count();
            if (area < static_cast<std::size_t>(p.min_area) ||
                area > static_cast<std::size_t>(p.max_area))
                continue;
            double acc = 0.0;
            for (int y = inst.box.y_min; y < inst.box.y_max; ++y)
                for (int x = inst.box.x_min; x < inst.box.x_max; ++x)
                    if (inst.mask.get(x, y)) {
                        std::size_t i = static_cast<std::size_t>(y) * img.width + x;
                        acc += std::abs(lum[i] - mean[i]);
                    }
            double score = std::clamp(p.score_scale * acc / static_cast<double>(area), 0.0, 1.0);
            out.detections.push_back(
                Detection::make(kind, score, inst.box, std::move(inst.mask)));
        }
    };
    harvest(bright, LesionKind::EX);
    harvest(dark, LesionKind::MA);
    return out;
}

void SynthSpec::check() const {
    if (image_count < 0) throw ValidationError("image_count must be >= 0");
    if (image_size < 32) throw ValidationError("image_size must be >= 32");
    auto range_ok = [](const std::array<int, 2>& r) { return r[0] >= 0 && r[0] <= r[1]; };
    if (!range_ok(ex_count_range) || !range_ok(ma_count_range))
        throw ValidationError("lesion count ranges must satisfy 0 <= lo <= hi");
    if (ex_radius_range[0] <= 0 || ex_radius_range[0] > ex_radius_range[1] ||
        ma_radius_range[0] <= 0 || ma_radius_range[0] > ma_radius_range[1])
        throw ValidationError("lesion radius ranges must satisfy 0 < lo <= hi");
    if (severity_medium_min < 1 || severity_severe_min <= severity_medium_min)
        throw ValidationError("severity thresholds must satisfy 1 <= medium_min < severe_min");
}

SynthSample generate_synthetic_one(const SynthSpec& spec, int index) {
    spec.check();
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(index));
    int size = spec.image_size;

    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "synth_%04d", index);
    FundusImage img(idbuf, size, size);

    double cx = size * 0.5 + rng.uniform(-0.02, 0.02) * size;
    double cy = size * 0.5 + rng.uniform(-0.02, 0.02) * size;
    double disc_r = rng.uniform(0.42, 0.46) * size;
    double base[3] = {rng.uniform(0.55, 0.70), rng.uniform(0.30, 0.40), rng.uniform(0.15, 0.25)};

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
            double d2 = dx * dx + dy * dy;
            if (d2 > disc_r * disc_r) continue;
            double falloff = 1.0 - 0.25 * d2 / (disc_r * disc_r);
            for (int c = 0; c < 3; ++c)
                img.at(x, y, c) = static_cast<float>(base[c] * falloff);
        }

    struct Planted {
        Ellipse shape;
        LesionKind kind;
        double reach;
    };
    std::vector<Planted> planted;
    auto place = [&](LesionKind kind, const std::array<double, 2>& radius_range) {
        for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
            double rad = rng.uniform(radius_range[0], radius_range[1]);
            double theta = rng.uniform(0.0, 3.14159265358979323846);
            double ratio = rng.uniform(0.6, 1.0);
            double rho = std::sqrt(rng.next_double()) * (disc_r - rad - 8.0);
            double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            Ellipse e{cx + rho * std::cos(phi), cy + rho * std::sin(phi),
                      rad, rad * ratio, std::cos(theta), std::sin(theta)};
            bool clear = true;
            for (const auto& other : planted) {
                double dx = e.cx - other.shape.cx, dy = e.cy - other.shape.cy;
                double min_dist = rad + other.reach + 10.0;
                if (dx * dx + dy * dy < min_dist * min_dist) {
                    clear = false;
                    break;
                }
            }
            if (!clear) continue;
            planted.push_back({e, kind, rad});
            return;
        }
        throw GenerationError("could not place a lesion without overlap after " +
                              std::to_string(kPlacementRetries) + " tries");
    };

    int n_ex = rng.uniform_int(spec.ex_count_range[0], spec.ex_count_range[1]);
    int n_ma = rng.uniform_int(spec.ma_count_range[0], spec.ma_count_range[1]);
    for (int k = 0; k < n_ex; ++k) place(LesionKind::EX, spec.ex_radius_range);
    for (int k = 0; k < n_ma; ++k) place(LesionKind::MA, spec.ma_radius_range);

    DetectionSet gt;
    gt.image_id = img.id;
    for (const auto& lesion : planted) {
        BinaryMask mask = rasterize(lesion.shape, size);
        if (!mask.any()) throw GenerationError("planted lesion rasterized to an empty mask");
        const auto& offset = lesion.kind == LesionKind::EX ? spec.ex_offset : spec.ma_offset;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (mask.get(x, y))
                    for (int c = 0; c < 3; ++c)
                        img.at(x, y, c) = std::clamp(
                            img.at(x, y, c) + static_cast<float>(offset[c]), 0.0f, 1.0f);
        gt.detections.push_back(Detection::make(lesion.kind, 1.0, {}, std::move(mask)));
    }

    int total = n_ex + n_ma;
    SeverityGrade grade = total >= spec.severity_severe_min  ? SeverityGrade::Severe
                          : total >= spec.severity_medium_min ? SeverityGrade::Medium
                                                              : SeverityGrade::Healthy;
    return SynthSample{std::move(img), std::move(gt), grade};
}

std::vector<SynthSample> generate_synthetic(const SynthSpec& spec) {
    spec.check();
    std::vector<SynthSample> out;
    out.reserve(static_cast<std::size_t>(spec.image_count));
    for (int k = 0; k < spec.image_count; ++k) out.push_back(generate_synthetic_one(spec, k));
    return out;
}

std::string write_synthetic_dataset(const SynthSpec& spec, const std::string& out_dir,
                                    const std::string& image_ext, int workers) {
    spec.check();
    if (image_ext != ".png" && image_ext != ".ppm")
        throw UsageError("synthetic images must be .png or .ppm");
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    std::vector<SynthSample> samples(static_cast<std::size_t>(spec.image_count));
    parallel_for(static_cast<std::size_t>(spec.image_count), workers,
                 [&](std::size_t k) { samples[k] = generate_synthetic_one(spec, static_cast<int>(k)); });

    DatasetManifest manifest;
    manifest.base_dir = out_dir;
    std::vector<DetectionSet> gt_sets;
    for (auto& sample : samples) {
        const std::string& id = sample.image.id;
        std::string image_rel = "images/" + id + image_ext;
        save_image(sample.image, (fs::path(out_dir) / image_rel).string());

        ManifestEntry entry;
        entry.image = image_rel;
        entry.severity = sample.severity;
        for (LesionKind kind : {LesionKind::EX, LesionKind::MA}) {
            BinaryMask combined(sample.image.width, sample.image.height);
            bool any = false;
            for (const auto& det : sample.ground_truth.detections)
                if (det.kind == kind) {
                    any = true;
                    for (int y = det.box.y_min; y < det.box.y_max; ++y)
                        for (int x = det.box.x_min; x < det.box.x_max; ++x)
                            if (det.mask->get(x, y)) combined.set(x, y);
                }
            if (!any) continue;
            std::string mask_ext = image_ext == ".ppm" ? ".pgm" : ".png";
            std::string mask_rel =
                "masks/" + id + (kind == LesionKind::EX ? "_ex" : "_ma") + mask_ext;
            save_mask(combined, (fs::path(out_dir) / mask_rel).string());
            (kind == LesionKind::EX ? entry.masks_ex : entry.masks_ma).push_back(mask_rel);
        }
        manifest.entries.push_back(std::move(entry));
        gt_sets.push_back(std::move(sample.ground_truth));
    }
    save_detections(gt_sets, (fs::path(out_dir) / "gt.jsonl").string());
    std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
    save_manifest(manifest, manifest_path);
    return manifest_path;
}

}  // namespace lesionkit
