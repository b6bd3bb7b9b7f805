#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lesionkit/core.hpp"
#include "lesionkit/detect.hpp"
#include "lesionkit/encoder.hpp"
#include "lesionkit/imageproc.hpp"
#include "lesionkit/neural.hpp"
#include "lesionkit/segmetrics.hpp"

namespace lesionkit {

enum class DetectorKind { Blob, Ingest, Oracle };

const char* to_string(DetectorKind k);

struct DetectorConfig {
    DetectorKind kind = DetectorKind::Blob;
    BlobDetectParams blob;
    std::string ingest_path;
};

struct RunConfig {
    std::optional<std::string> manifest_path;
    std::optional<SynthSpec> synth;
    PreprocessParams preprocess;
    DetectorConfig detector;
    EncoderConfig encoder;
    TrainHyper training;
    int hidden_size = 16;
    std::string out_dir;
    std::uint64_t seed = 42;
    int workers = 1;

    void check() const;
};

// Key = value text file; '#' starts a comment; unknown keys are rejected.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& text, const std::string& base_dir = "");
std::string render_run_config(const RunConfig& cfg);

enum class Phase2Ablation { BoxesRaw, BoxesNorm, BoxesNormMasks };

const char* to_string(Phase2Ablation a);
// Table-style test options: (normalize_boxes, use_masks) per ablation.
EncoderConfig ablation_encoder(const RunConfig& cfg, Phase2Ablation a);

struct PreparedImage {
    std::string image_id;
    Split split = Split::Train;
    DetectionSet ground_truth;  // normalized space, dilated + split per config
    DetectionSet detections;
    std::optional<SeverityGrade> severity;
    std::string normalized_path;  // persisted normalized image
};

struct PreparedDataset {
    std::vector<PreparedImage> images;
    std::string dataset_dir;
};

// Preprocess + detect for every manifest entry; persists normalized images,
// ground truth and detections under out_dir. Seeded 70/15/15 split assignment
// when the manifest does not carry one.
PreparedDataset prepare_dataset(const RunConfig& cfg);

struct Phase2Result {
    Phase2Ablation ablation;
    double accuracy = 0.0;
    ConfusionMatrix confusion;
    EncoderConfig encoder;
    TrainHistory history;
};

EvalReport run_phase1(const RunConfig& cfg);
EvalReport run_phase1_prepared(const RunConfig& cfg, const PreparedDataset& data);

Phase2Result run_phase2(const RunConfig& cfg, Phase2Ablation ablation);
Phase2Result run_phase2_prepared(const RunConfig& cfg, const PreparedDataset& data,
                                 Phase2Ablation ablation);

struct ArtifactEntry {
    std::string path;  // relative to out_dir
    std::string digest;
};

struct RunArtifacts {
    EvalReport phase1;
    std::vector<Phase2Result> phase2;
    std::vector<ArtifactEntry> files;
};

// Phase 1 followed by all three phase-2 ablations; writes an artifact manifest
// with content digests to out_dir/artifacts.json.
RunArtifacts run_end_to_end(const RunConfig& cfg);

}  // namespace lesionkit
