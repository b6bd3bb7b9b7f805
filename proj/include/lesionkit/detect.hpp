#pragma once

#include <array>
#include <string>
#include <vector>

#include "lesionkit/core.hpp"

namespace lesionkit {

struct BlobDetectParams {
    double bright_threshold = 0.22;  // lum excess over local mean -> EX
    double dark_threshold = 0.30;    // lum deficit under local mean -> MA
    int min_area = 4;
    int max_area = 100000;
    double score_scale = 4.0;

    void check() const;
};

// Reads a detection record file and groups by image id. The parse itself
// lives in core; this is the boundary where external detector output enters.
std::vector<DetectionSet> ingest_detections(const std::string& path);

// Classical stand-in detector for normalized images: connected components of
// strong local-mean excess (bright -> EX) or deficit (dark -> MA).
DetectionSet blob_detect(const FundusImage& img, const BlobDetectParams& p);

struct SynthSpec {
    int image_count = 10;
    int image_size = 256;
    std::array<int, 2> ex_count_range{0, 3};
    std::array<int, 2> ma_count_range{0, 3};
    std::array<double, 2> ex_radius_range{6.0, 11.0};
    std::array<double, 2> ma_radius_range{2.5, 4.5};
    std::array<double, 3> ex_offset{0.25, 0.20, 0.05};
    std::array<double, 3> ma_offset{-0.25, -0.15, -0.05};
    int severity_medium_min = 1;  // total lesions for grade >= medium
    int severity_severe_min = 4;  // total lesions for grade severe
    std::uint64_t seed = 0;

    void check() const;
};

struct SynthSample {
    FundusImage image;
    DetectionSet ground_truth;
    SeverityGrade severity;
};

// Deterministic for a fixed spec; image k draws from stream(seed, k) so images
// are independent of image_count and may be generated in parallel.
std::vector<SynthSample> generate_synthetic(const SynthSpec& spec);
SynthSample generate_synthetic_one(const SynthSpec& spec, int index);

// Writes images, combined per-kind masks, a ground-truth detection record
// file (gt.jsonl) and manifest.json under out_dir. Returns the manifest path.
std::string write_synthetic_dataset(const SynthSpec& spec, const std::string& out_dir,
                                    const std::string& image_ext = ".png", int workers = 1);

}  // namespace lesionkit
