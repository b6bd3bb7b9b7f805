#include "lesionkit/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lesionkit/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lesionkit {

const char* to_string(DetectorKind k) {
    switch (k) {
        case DetectorKind::Blob: return "blob";
        case DetectorKind::Ingest: return "ingest";
        default: return "oracle";
    }
}

const char* to_string(Phase2Ablation a) {
    switch (a) {
        case Phase2Ablation::BoxesRaw: return "boxes_raw";
        case Phase2Ablation::BoxesNorm: return "boxes_norm";
        default: return "boxes_norm_masks";
    }
}

EncoderConfig ablation_encoder(const RunConfig& cfg, Phase2Ablation a) {
    EncoderConfig enc = cfg.encoder;
    enc.image_size = cfg.preprocess.target_size;
    switch (a) {
        case Phase2Ablation::BoxesRaw:
            enc.normalize_boxes = false;
            enc.use_masks = false;
            break;
        case Phase2Ablation::BoxesNorm:
            enc.normalize_boxes = true;
            enc.use_masks = false;
            break;
        case Phase2Ablation::BoxesNormMasks:
            enc.normalize_boxes = true;
            enc.use_masks = true;
            break;
    }
    return enc;
}

void RunConfig::check() const {
    if (manifest_path.has_value() == synth.has_value())
        throw ConfigError("exactly one of manifest or synth.* must be configured");
    if (out_dir.empty()) throw ConfigError("out_dir must be set");
    if (detector.kind == DetectorKind::Ingest && detector.ingest_path.empty())
        throw ConfigError("detector=ingest requires ingest.path");
    if (hidden_size < 1) throw ConfigError("train.hidden must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    preprocess.check();
    detector.blob.check();
    encoder.check();
    if (synth) synth->check();
}

// ----- config file ------------------------------------------------------------

namespace {

std::pair<int, int> parse_int_pair(const std::string& v) {
    auto comma = v.find(',');
    if (comma == std::string::npos) throw ConfigError("expected lo,hi pair: " + v);
    return {std::stoi(v.substr(0, comma)), std::stoi(v.substr(comma + 1))};
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true/false: " + v);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& base_dir) {
    RunConfig cfg;
    cfg.workers = default_workers();
    cfg.training.stop_when_perfect = true;
    bool have_synth = false;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        auto resolve = [&](const std::string& p) {
            if (base_dir.empty() || fs::path(p).is_absolute()) return p;
            return (fs::path(base_dir) / p).string();
        };
        try {
            if (key == "manifest") cfg.manifest_path = resolve(value);
            else if (key == "out_dir") cfg.out_dir = resolve(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "workers") cfg.workers = std::stoi(value);
            else if (key == "synth.count") { cfg.synth = cfg.synth.value_or(SynthSpec{}); cfg.synth->image_count = std::stoi(value); have_synth = true; }
            else if (key == "synth.size") { cfg.synth = cfg.synth.value_or(SynthSpec{}); cfg.synth->image_size = std::stoi(value); have_synth = true; }
            else if (key == "synth.seed") { cfg.synth = cfg.synth.value_or(SynthSpec{}); cfg.synth->seed = std::stoull(value); have_synth = true; }
            else if (key == "synth.ex_count") { cfg.synth = cfg.synth.value_or(SynthSpec{}); auto [lo, hi] = parse_int_pair(value); cfg.synth->ex_count_range = {lo, hi}; have_synth = true; }
            else if (key == "synth.ma_count") { cfg.synth = cfg.synth.value_or(SynthSpec{}); auto [lo, hi] = parse_int_pair(value); cfg.synth->ma_count_range = {lo, hi}; have_synth = true; }
            else if (key == "preprocess.target_size") cfg.preprocess.target_size = std::stoi(value);
            else if (key == "preprocess.dilation_kernel") cfg.preprocess.dilation_kernel = std::stoi(value);
            else if (key == "preprocess.dilation_iterations") cfg.preprocess.dilation_iterations = std::stoi(value);
            else if (key == "preprocess.contrast_blur_radius") cfg.preprocess.contrast_blur_radius = std::stod(value);
            else if (key == "preprocess.contrast_gain") cfg.preprocess.contrast_gain = std::stod(value);
            else if (key == "preprocess.circular_crop") cfg.preprocess.circular_crop = parse_bool(value);
            else if (key == "preprocess.dilate_both_kinds") cfg.preprocess.dilate_both_kinds = parse_bool(value);
            else if (key == "detector") {
                if (value == "blob") cfg.detector.kind = DetectorKind::Blob;
                else if (value == "ingest") cfg.detector.kind = DetectorKind::Ingest;
                else if (value == "oracle") cfg.detector.kind = DetectorKind::Oracle;
                else throw ConfigError("unknown detector: " + value);
            }
            else if (key == "blob.bright_threshold") cfg.detector.blob.bright_threshold = std::stod(value);
            else if (key == "blob.dark_threshold") cfg.detector.blob.dark_threshold = std::stod(value);
            else if (key == "blob.min_area") cfg.detector.blob.min_area = std::stoi(value);
            else if (key == "blob.max_area") cfg.detector.blob.max_area = std::stoi(value);
            else if (key == "blob.score_scale") cfg.detector.blob.score_scale = std::stod(value);
            else if (key == "ingest.path") cfg.detector.ingest_path = resolve(value);
            else if (key == "encoder.mask_crop_size") cfg.encoder.mask_crop_size = std::stoi(value);
            else if (key == "encoder.feature_dim") cfg.encoder.feature_dim = std::stoi(value);
            else if (key == "encoder.include_score") cfg.encoder.include_score = parse_bool(value);
            else if (key == "encoder.combine") {
                if (value == "add") cfg.encoder.combine = MaskCombine::Add;
                else if (value == "concat") cfg.encoder.combine = MaskCombine::Concat;
                else throw ConfigError("unknown encoder.combine: " + value);
            }
            else if (key == "train.hidden") cfg.hidden_size = std::stoi(value);
            else if (key == "train.lr") cfg.training.learning_rate = std::stod(value);
            else if (key == "train.momentum") cfg.training.momentum = std::stod(value);
            else if (key == "train.epochs") cfg.training.epochs = std::stoi(value);
            else if (key == "train.clip") cfg.training.clip_norm = std::stod(value);
            else if (key == "train.stop_when_perfect") cfg.training.stop_when_perfect = parse_bool(value);
            else if (key == "train.class_weights") {
                std::istringstream ws(value);
                std::array<double, 3> weights{};
                char comma = 0;
                if (!(ws >> weights[0] >> comma >> weights[1] >> comma >> weights[2]))
                    throw ConfigError("expected w0,w1,w2: " + value);
                cfg.training.class_weights = weights;
            }
            else throw ConfigError("unknown config key: " + key);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("config line " + std::to_string(line_no) + " (" + key +
                              "): " + e.what());
        }
    }
    (void)have_synth;
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str(), fs::path(path).parent_path().string());
}

std::string render_run_config(const RunConfig& cfg) {
    std::ostringstream out;
    if (cfg.manifest_path) out << "manifest = " << *cfg.manifest_path << "\n";
    if (cfg.synth) {
        out << "synth.count = " << cfg.synth->image_count << "\n";
        out << "synth.size = " << cfg.synth->image_size << "\n";
        out << "synth.seed = " << cfg.synth->seed << "\n";
        out << "synth.ex_count = " << cfg.synth->ex_count_range[0] << "," << cfg.synth->ex_count_range[1] << "\n";
        out << "synth.ma_count = " << cfg.synth->ma_count_range[0] << "," << cfg.synth->ma_count_range[1] << "\n";
    }
    out << "out_dir = " << cfg.out_dir << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "workers = " << cfg.workers << "\n";
    out << "preprocess.target_size = " << cfg.preprocess.target_size << "\n";
    out << "preprocess.dilation_kernel = " << cfg.preprocess.dilation_kernel << "\n";
    out << "preprocess.dilation_iterations = " << cfg.preprocess.dilation_iterations << "\n";
    out << "preprocess.contrast_blur_radius = " << cfg.preprocess.contrast_blur_radius << "\n";
    out << "preprocess.contrast_gain = " << cfg.preprocess.contrast_gain << "\n";
    out << "preprocess.circular_crop = " << (cfg.preprocess.circular_crop ? "true" : "false") << "\n";
    out << "preprocess.dilate_both_kinds = " << (cfg.preprocess.dilate_both_kinds ? "true" : "false") << "\n";
    out << "detector = " << to_string(cfg.detector.kind) << "\n";
    if (cfg.detector.kind == DetectorKind::Blob) {
        out << "blob.bright_threshold = " << cfg.detector.blob.bright_threshold << "\n";
        out << "blob.dark_threshold = " << cfg.detector.blob.dark_threshold << "\n";
        out << "blob.min_area = " << cfg.detector.blob.min_area << "\n";
        out << "blob.max_area = " << cfg.detector.blob.max_area << "\n";
        out << "blob.score_scale = " << cfg.detector.blob.score_scale << "\n";
    }
    if (cfg.detector.kind == DetectorKind::Ingest)
        out << "ingest.path = " << cfg.detector.ingest_path << "\n";
    out << "encoder.mask_crop_size = " << cfg.encoder.mask_crop_size << "\n";
    out << "encoder.feature_dim = " << cfg.encoder.feature_dim << "\n";
    out << "encoder.include_score = " << (cfg.encoder.include_score ? "true" : "false") << "\n";
    out << "encoder.combine = " << (cfg.encoder.combine == MaskCombine::Add ? "add" : "concat") << "\n";
    out << "train.hidden = " << cfg.hidden_size << "\n";
    out << "train.lr = " << cfg.training.learning_rate << "\n";
    out << "train.momentum = " << cfg.training.momentum << "\n";
    out << "train.epochs = " << cfg.training.epochs << "\n";
    out << "train.clip = " << cfg.training.clip_norm << "\n";
    out << "train.stop_when_perfect = " << (cfg.training.stop_when_perfect ? "true" : "false")
        << "\n";
    if (cfg.training.class_weights) {
        const auto& w = *cfg.training.class_weights;
        out << "train.class_weights = " << w[0] << "," << w[1] << "," << w[2] << "\n";
    }
    return out.str();
}

// ----- dataset preparation ------------------------------------------------------

namespace {

std::vector<Split> assign_splits(const DatasetManifest& manifest, std::uint64_t seed) {
    std::vector<Split> splits(manifest.entries.size(), Split::Train);
    std::vector<std::size_t> unassigned;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].split)
            splits[i] = *manifest.entries[i].split;
        else
            unassigned.push_back(i);
    }
    if (unassigned.empty()) return splits;
    // Seeded 70/15/15 for manifests without explicit splits.
    Rng rng = Rng::stream(seed, 0x5f17);
    rng.shuffle(unassigned);
    std::size_t n = unassigned.size();
    std::size_t n_train = static_cast<std::size_t>(n * 0.70);
    std::size_t n_val = static_cast<std::size_t>(n * 0.15);
    for (std::size_t k = 0; k < n; ++k)
        splits[unassigned[k]] =
            k < n_train ? Split::Train : (k < n_train + n_val ? Split::Validation : Split::Test);
    return splits;
}

BinaryMask combined_mask(const std::vector<std::string>& paths, const std::string& base_dir,
                         int width, int height) {
    BinaryMask combined(width, height);
    for (const auto& rel : paths) {
        fs::path p(rel);
        if (!p.is_absolute() && !base_dir.empty()) p = fs::path(base_dir) / p;
        BinaryMask m = load_mask(p.string());
        if (m.width() != width || m.height() != height)
            throw ValidationError("mask dimensions differ from image: " + rel);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                if (m.get(x, y)) combined.set(x, y);
    }
    return combined;
}

struct ArtifactCollector {
    std::string root;
    std::vector<ArtifactEntry> files;

    void write_text(const std::string& rel, const std::string& content) {
        fs::path full = fs::path(root) / rel;
        fs::create_directories(full.parent_path());
        std::ofstream out(full, std::ios::binary);
        if (!out) throw UsageError("cannot write " + full.string());
        out << content;
        files.push_back({rel, to_hex(fnv1a64(content))});
    }

    void note_file(const std::string& rel) {
        fs::path full = fs::path(root) / rel;
        std::ifstream in(full, std::ios::binary);
        if (!in) throw ComputeError("missing artifact: " + full.string());
        std::ostringstream buf;
        buf << in.rdbuf();
        files.push_back({rel, to_hex(fnv1a64(buf.str()))});
    }
};

}  // namespace

PreparedDataset prepare_dataset(const RunConfig& cfg) {
    cfg.check();
    fs::create_directories(cfg.out_dir);

    std::string manifest_path;
    if (cfg.synth) {
        manifest_path = write_synthetic_dataset(
            *cfg.synth, (fs::path(cfg.out_dir) / "dataset").string(), ".png", cfg.workers);
    } else {
        manifest_path = *cfg.manifest_path;
    }

    DatasetManifest manifest = load_manifest(manifest_path);
    if (manifest.entries.empty()) throw ConfigError("manifest has no entries");
    ValidationReport vr = validate_manifest(manifest);
    if (!vr.ok()) {
        std::ostringstream msg;
        msg << "manifest failed validation with " << vr.issues.size() << " issue(s); first: entry "
            << vr.issues.front().entry << ": " << vr.issues.front().message;
        throw ConfigError(msg.str());
    }

    std::vector<Split> splits = assign_splits(manifest, cfg.seed);

    std::vector<DetectionSet> ingested;
    if (cfg.detector.kind == DetectorKind::Ingest)
        ingested = ingest_detections(cfg.detector.ingest_path);

    fs::path pre_dir = fs::path(cfg.out_dir) / "preprocessed";
    fs::create_directories(pre_dir);

    PreparedDataset data;
    data.dataset_dir = fs::path(manifest_path).parent_path().string();
    data.images.assign(manifest.entries.size(), PreparedImage{});

    parallel_for(manifest.entries.size(), cfg.workers, [&](std::size_t i) {
        const ManifestEntry& entry = manifest.entries[i];
        fs::path image_path(entry.image);
        if (!image_path.is_absolute() && !manifest.base_dir.empty())
            image_path = fs::path(manifest.base_dir) / image_path;

        FundusImage raw = load_image(image_path.string());
        NormalizeTransform transform = compute_normalization(raw, cfg.preprocess);
        FundusImage normalized = apply_normalization(raw, transform);

        PreparedImage& out = data.images[i];
        out.image_id = raw.id;
        out.split = splits[i];
        out.severity = entry.severity;
        if (!out.severity && entry.severity_raw)
            out.severity = map_raw_severity(*entry.severity_raw);

        out.ground_truth.image_id = raw.id;
        for (LesionKind kind : {LesionKind::EX, LesionKind::MA}) {
            const auto& paths = kind == LesionKind::EX ? entry.masks_ex : entry.masks_ma;
            if (paths.empty()) continue;
            BinaryMask mask = combined_mask(paths, manifest.base_dir, raw.width, raw.height);
            BinaryMask norm_mask = apply_normalization(mask, transform);
            bool dilate = kind == LesionKind::MA || cfg.preprocess.dilate_both_kinds;
            if (dilate)
                norm_mask = dilate_mask(norm_mask, cfg.preprocess.dilation_kernel,
                                        cfg.preprocess.dilation_iterations);
            for (auto& inst : split_instances(norm_mask, kind))
                out.ground_truth.detections.push_back(
                    Detection::make(kind, 1.0, inst.box, std::move(inst.mask)));
        }

        switch (cfg.detector.kind) {
            case DetectorKind::Blob: {
                out.detections = blob_detect(normalized, cfg.detector.blob);
                // The ground truth above is dilated, so the stand-in's masks
                // get the same treatment; a learned detector trained on
                // dilated masks would emit dilated-scale masks on its own.
                for (auto& det : out.detections.detections) {
                    bool dilate = det.kind == LesionKind::MA || cfg.preprocess.dilate_both_kinds;
                    if (dilate && det.mask && cfg.preprocess.dilation_iterations > 0)
                        det = Detection::make(det.kind, det.score,
                                              det.box,
                                              dilate_mask(*det.mask, cfg.preprocess.dilation_kernel,
                                                          cfg.preprocess.dilation_iterations));
                }
                break;
            }
            case DetectorKind::Oracle:
                out.detections = out.ground_truth;
                break;
            case DetectorKind::Ingest:
                out.detections.image_id = raw.id;
                for (const auto& set : ingested)
                    if (set.image_id == raw.id) out.detections = set;
                break;
        }

        out.normalized_path = (pre_dir / (raw.id + ".png")).string();
        save_image(normalized, out.normalized_path);
    });

    std::vector<DetectionSet> gt_sets, det_sets;
    for (const auto& img : data.images) {
        gt_sets.push_back(img.ground_truth);
        det_sets.push_back(img.detections);
    }
    save_detections(gt_sets, (fs::path(cfg.out_dir) / "ground_truth.jsonl").string());
    save_detections(det_sets, (fs::path(cfg.out_dir) / "detections.jsonl").string());
    return data;
}

EvalReport run_phase1_prepared(const RunConfig& cfg, const PreparedDataset& data) {
    bool any_gt = false;
    for (const auto& img : data.images)
        if (!img.ground_truth.detections.empty()) any_gt = true;
    if (!any_gt) throw ConfigError("phase 1 needs ground-truth masks in the manifest");

    SplitResults results;
    for (const auto& img : data.images)
        results[img.split].push_back({img.detections, img.ground_truth});

    EvalReport report = phase1_report(results);

    ArtifactCollector art{cfg.out_dir, {}};
    art.write_text("phase1/report.txt", render_report_text(report));
    art.write_text("phase1/report.json", render_report_json(report));
    art.write_text("phase1/per_image.csv", render_per_image_csv(report));
    return report;
}

EvalReport run_phase1(const RunConfig& cfg) {
    PreparedDataset data = prepare_dataset(cfg);
    return run_phase1_prepared(cfg, data);
}

Phase2Result run_phase2_prepared(const RunConfig& cfg, const PreparedDataset& data,
                                 Phase2Ablation ablation) {
    EncoderConfig enc = ablation_encoder(cfg, ablation);
    enc.check();

    std::vector<std::pair<FeatureSequence, SeverityGrade>> train_set, test_set;
    for (const auto& img : data.images) {
        if (!img.severity)
            throw ConfigError("phase 2 needs severity labels; none for image " + img.image_id);
        if (img.split == Split::Validation) continue;
        auto& bucket = img.split == Split::Train ? train_set : test_set;
        bucket.push_back({build_sequence(img.detections, enc), *img.severity});
    }
    if (train_set.empty() || test_set.empty())
        throw ConfigError("phase 2 needs non-empty train and test splits");

    TrainHyper hyper = cfg.training;
    hyper.seed = Rng::stream(cfg.seed, 0xf2 + static_cast<std::uint64_t>(ablation)).next_u64();

    SeverityModel model = SeverityModel::init(enc.feature_dim, cfg.hidden_size,
                                              enc.mask_crop_size, enc.combine, hyper.seed);
    Phase2Result result;
    result.ablation = ablation;
    result.encoder = enc;
    result.history = train(model, train_set, hyper);

    std::vector<SeverityGrade> truth, predicted;
    for (const auto& [seq, label] : test_set) {
        truth.push_back(label);
        predicted.push_back(predict_severity(model, seq).grade);
    }
    result.confusion = confusion_from_labels(truth, predicted);
    result.accuracy = accuracy(result.confusion);

    std::string tag = to_string(ablation);
    ArtifactCollector art{cfg.out_dir, {}};
    json o;
    o["ablation"] = tag;
    o["normalize_boxes"] = enc.normalize_boxes;
    o["use_masks"] = enc.use_masks;
    o["accuracy"] = json::parse(format_fixed4(result.accuracy));
    json cm = json::array();
    for (int t = 0; t < 3; ++t) {
        json row = json::array();
        for (int p = 0; p < 3; ++p) row.push_back(result.confusion.at(t, p));
        cm.push_back(std::move(row));
    }
    o["confusion"] = cm;
    o["train_images"] = train_set.size();
    o["test_images"] = test_set.size();
    o["final_train_accuracy"] =
        result.history.epochs.empty() ? 0.0 : result.history.epochs.back().train_accuracy;
    art.write_text("phase2/" + tag + "/result.json", o.dump(2) + "\n");
    art.write_text("phase2/" + tag + "/result.txt",
                   render_confusion_text(result.confusion, result.accuracy));
    save_model(model, (fs::path(cfg.out_dir) / "phase2" / tag / "model.ckpt").string());
    return result;
}

Phase2Result run_phase2(const RunConfig& cfg, Phase2Ablation ablation) {
    PreparedDataset data = prepare_dataset(cfg);
    return run_phase2_prepared(cfg, data, ablation);
}

RunArtifacts run_end_to_end(const RunConfig& cfg) {
    RunArtifacts artifacts;
    ArtifactCollector art{cfg.out_dir, {}};

    PreparedDataset data = prepare_dataset(cfg);
    art.write_text("config.snapshot.txt", render_run_config(cfg));
    art.note_file("ground_truth.jsonl");
    art.note_file("detections.jsonl");

    artifacts.phase1 = run_phase1_prepared(cfg, data);
    art.note_file("phase1/report.txt");
    art.note_file("phase1/report.json");
    art.note_file("phase1/per_image.csv");

    for (Phase2Ablation ablation : {Phase2Ablation::BoxesRaw, Phase2Ablation::BoxesNorm,
                                    Phase2Ablation::BoxesNormMasks}) {
        artifacts.phase2.push_back(run_phase2_prepared(cfg, data, ablation));
        std::string tag = to_string(ablation);
        art.note_file("phase2/" + tag + "/result.json");
        art.note_file("phase2/" + tag + "/result.txt");
        art.note_file("phase2/" + tag + "/model.ckpt");
    }

    // Overlays for the test split, capped to keep runs small.
    fs::create_directories(fs::path(cfg.out_dir) / "overlays");
    int emitted = 0;
    for (const auto& img : data.images) {
        if (img.split != Split::Test || emitted >= 5) continue;
        FundusImage normalized = load_image(img.normalized_path);
        FundusImage overlay = render_overlay(normalized, img.detections, &img.ground_truth);
        std::string rel = "overlays/" + img.image_id + ".png";
        save_image(overlay, (fs::path(cfg.out_dir) / rel).string());
        art.note_file(rel);
        ++emitted;
    }

    std::sort(art.files.begin(), art.files.end(),
              [](const ArtifactEntry& a, const ArtifactEntry& b) { return a.path < b.path; });
    json manifest = json::array();
    for (const auto& f : art.files) manifest.push_back({{"path", f.path}, {"digest", f.digest}});
    std::ofstream out(fs::path(cfg.out_dir) / "artifacts.json", std::ios::binary);
    out << manifest.dump(2) << "\n";
    artifacts.files = art.files;
    return artifacts;
}

}  // namespace lesionkit
