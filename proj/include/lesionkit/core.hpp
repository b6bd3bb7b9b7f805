#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lesionkit/common.hpp"

namespace lesionkit {

enum class LesionKind { EX = 0, MA = 1 };

const char* to_string(LesionKind k);
LesionKind lesion_kind_from_string(const std::string& s);

enum class SeverityGrade { Healthy = 0, Medium = 1, Severe = 2 };

inline int grade_index(SeverityGrade g) { return static_cast<int>(g); }
SeverityGrade grade_from_index(int i);

// Per-pixel boolean raster, row-major, packed 64 bits per word.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height);

    int width() const { return width_; }
    int height() const { return height_; }

    bool get(int x, int y) const {
        std::size_t i = idx(x, y);
        return (words_[i >> 6] >> (i & 63)) & 1u;
    }
    void set(int x, int y, bool v = true) {
        std::size_t i = idx(x, y);
        std::uint64_t bit = 1ULL << (i & 63);
        if (v)
            words_[i >> 6] |= bit;
        else
            words_[i >> 6] &= ~bit;
    }

    std::size_t count() const;
    bool any() const;
    bool same_size(const BinaryMask& o) const { return width_ == o.width_ && height_ == o.height_; }

    static std::size_t intersection_count(const BinaryMask& a, const BinaryMask& b);
    static std::size_t union_count(const BinaryMask& a, const BinaryMask& b);

    bool operator==(const BinaryMask& o) const {
        return width_ == o.width_ && height_ == o.height_ && words_ == o.words_;
    }

private:
    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint64_t> words_;
};

// Half-open pixel box: [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    long long area() const {
        return static_cast<long long>(x_max - x_min) * (y_max - y_min);
    }
    bool valid() const { return x_min >= 0 && y_min >= 0 && x_min < x_max && y_min < y_max; }
    bool operator==(const BoundingBox&) const = default;
};

// Tight half-open box around the set bits; throws DegenerateInputError on an
// empty mask.
BoundingBox tight_bbox(const BinaryMask& mask);

struct Detection {
    LesionKind kind = LesionKind::EX;
    double score = 0.0;
    BoundingBox box;
    std::optional<BinaryMask> mask;

    // When a mask is given the stored box is recomputed as its tight bbox.
    static Detection make(LesionKind kind, double score, BoundingBox box,
                          std::optional<BinaryMask> mask = std::nullopt);

    bool operator==(const Detection&) const = default;
};

struct DetectionSet {
    std::string image_id;
    std::vector<Detection> detections;

    bool operator==(const DetectionSet&) const = default;
};

// RGB raster with [0,1] intensities, row-major, channel-interleaved.
struct FundusImage {
    std::string id;
    int width = 0;
    int height = 0;
    std::vector<float> pixels;  // width * height * 3

    FundusImage() = default;
    FundusImage(std::string id_, int w, int h, float fill = 0.0f);

    float at(int x, int y, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    float& at(int x, int y, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
};

// ----- severity labels ------------------------------------------------------

using SeverityMapping = std::array<SeverityGrade, 5>;

// 0 -> healthy, {1,2} -> medium, {3,4} -> severe.
SeverityMapping default_severity_mapping();

SeverityGrade map_raw_severity(int raw, const SeverityMapping& table = default_severity_mapping());

// ----- dataset manifest -----------------------------------------------------

enum class Split { Train = 0, Validation = 1, Test = 2 };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string image;
    std::vector<std::string> masks_ex;
    std::vector<std::string> masks_ma;
    std::optional<int> severity_raw;       // 0..4
    std::optional<SeverityGrade> severity; // 3-class label
    std::optional<Split> split;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    // Paths inside entries are resolved relative to this directory.
    std::string base_dir;
};

struct ValidationIssue {
    std::size_t entry;  // index into entries
    std::string message;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;
    bool ok() const { return issues.empty(); }
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);
ValidationReport validate_manifest(const DatasetManifest& manifest);

// ----- detection record format ----------------------------------------------
//
// Line-delimited JSON, one detection per line:
//   {"box":[x0,y0,x1,y1],"image_id":"img","kind":"EX","mask_rle":"W,H;r0,r1,...","score":0.5}
// mask_rle holds run lengths of alternating 0s and 1s, starting with 0s,
// row-major over a W x H raster.

std::string encode_mask_rle(const BinaryMask& mask);
BinaryMask decode_mask_rle(const std::string& rle);

std::string serialize_detections(const std::vector<DetectionSet>& sets);
void save_detections(const std::vector<DetectionSet>& sets, const std::string& path);

// Groups records by image_id in first-appearance order. Throws ParseError with
// a line number on malformed input.
std::vector<DetectionSet> parse_detections(const std::string& text);
std::vector<DetectionSet> load_detections(const std::string& path);

}  // namespace lesionkit
