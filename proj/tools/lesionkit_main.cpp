#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lesionkit/detect.hpp"
#include "lesionkit/image_io.hpp"
#include "lesionkit/imageproc.hpp"
#include "lesionkit/neural.hpp"
#include "lesionkit/pipeline.hpp"
#include "lesionkit/segmetrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lesionkit;

namespace {

std::string default_out(const std::string& given, const std::string& subdir) {
    if (!given.empty()) return given;
    if (const char* env = std::getenv("LESIONKIT_OUT")) return (fs::path(env) / subdir).string();
    throw ConfigError("--out is required (or set LESIONKIT_OUT)");
}

std::pair<int, int> parse_int_pair_cli(const std::string& v) {
    auto comma = v.find(',');
    if (comma == std::string::npos) throw ValidationError("expected lo,hi pair: " + v);
    return {std::stoi(v.substr(0, comma)), std::stoi(v.substr(comma + 1))};
}

std::vector<double> parse_thresholds(const std::string& spec) {
    std::vector<double> out;
    std::istringstream in(spec);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        double t = std::stod(tok);
        if (!(t > 0.0 && t <= 1.0)) throw ValidationError("thresholds must lie in (0,1]");
        out.push_back(t);
    }
    if (out.empty()) throw ValidationError("no thresholds given");
    return out;
}

void add_preprocess_flags(CLI::App* cmd, PreprocessParams& p) {
    cmd->add_option("--target-size", p.target_size, "output side in pixels");
    cmd->add_option("--dilation-kernel", p.dilation_kernel, "odd square kernel side");
    cmd->add_option("--dilation-iterations", p.dilation_iterations, "dilation repeat count");
    cmd->add_option("--blur-radius", p.contrast_blur_radius,
                    "local-mean radius as a fraction of width");
    cmd->add_option("--gain", p.contrast_gain, "contrast gain");
    cmd->add_flag("--no-circular-crop", [&p](std::int64_t) { p.circular_crop = false; },
                  "keep pixels outside the retina disc");
    cmd->add_flag("--dilate-both", p.dilate_both_kinds, "dilate EX masks too, not only MA");
}

void add_encoder_flags(CLI::App* cmd, EncoderConfig& enc) {
    cmd->add_option("--image-size", enc.image_size, "normalization divisor for box coords");
    cmd->add_option("--feature-dim", enc.feature_dim, "per-step feature width");
    cmd->add_option("--crop-size", enc.mask_crop_size, "mask branch input side (power of two)");
    cmd->add_flag("--use-masks", enc.use_masks, "feed mask crops through the conv branch");
    cmd->add_flag("--no-normalize-boxes", [&enc](std::int64_t) { enc.normalize_boxes = false; },
                  "keep raw pixel coordinates");
    cmd->add_flag("--include-score", enc.include_score, "append detection score to features");
    cmd->add_flag("--concat", [&enc](std::int64_t) { enc.combine = MaskCombine::Concat; },
                  "concatenate the mask branch instead of adding it");
}

// Pairs prediction and ground-truth sets by image id (union, file order).
std::vector<std::pair<DetectionSet, DetectionSet>> pair_by_id(
    const std::vector<DetectionSet>& preds, const std::vector<DetectionSet>& gts) {
    std::vector<std::pair<DetectionSet, DetectionSet>> out;
    std::map<std::string, std::size_t> index;
    for (const auto& gt : gts) {
        index[gt.image_id] = out.size();
        out.push_back({DetectionSet{gt.image_id, {}}, gt});
    }
    for (const auto& pred : preds) {
        auto it = index.find(pred.image_id);
        if (it == index.end()) {
            index[pred.image_id] = out.size();
            out.push_back({pred, DetectionSet{pred.image_id, {}}});
        } else {
            out[it->second].first = pred;
        }
    }
    return out;
}

std::map<std::string, SeverityGrade> labels_from_manifest(const DatasetManifest& manifest) {
    std::map<std::string, SeverityGrade> labels;
    for (const auto& entry : manifest.entries) {
        std::string id = fs::path(entry.image).stem().string();
        if (entry.severity)
            labels[id] = *entry.severity;
        else if (entry.severity_raw)
            labels[id] = map_raw_severity(*entry.severity_raw);
    }
    return labels;
}

std::map<std::string, Split> splits_from_manifest(const DatasetManifest& manifest) {
    std::map<std::string, Split> splits;
    for (const auto& entry : manifest.entries)
        if (entry.split) splits[fs::path(entry.image).stem().string()] = *entry.split;
    return splits;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"lesion analysis toolkit: preprocessing, detection ingestion, "
                 "segmentation metrics and severity classification"};
    app.require_subcommand(1);
    bool machine = false;
    app.add_flag("--json", machine, "emit machine-readable JSON records on stdout");
    int workers = default_workers();
    app.add_option("--workers", workers, "worker pool size for per-image stages");

    // ---- preprocess ----
    auto* cmd_pre = app.add_subcommand("preprocess", "normalize images and masks from a manifest");
    std::string pre_manifest, pre_out;
    PreprocessParams pre_params;
    cmd_pre->add_option("--manifest", pre_manifest, "dataset manifest")->required();
    cmd_pre->add_option("--out", pre_out, "output directory");
    add_preprocess_flags(cmd_pre, pre_params);

    // ---- split-masks ----
    auto* cmd_split = app.add_subcommand("split-masks", "split a combined mask into instances");
    std::string split_mask, split_kind = "EX", split_out;
    int split_dilate_kernel = 0, split_dilate_iters = 0;
    cmd_split->add_option("--mask", split_mask, "combined binary mask raster")->required();
    cmd_split->add_option("--kind", split_kind, "lesion kind: EX or MA");
    cmd_split->add_option("--out", split_out, "output directory");
    cmd_split->add_option("--dilation-kernel", split_dilate_kernel, "dilate before splitting");
    cmd_split->add_option("--dilation-iterations", split_dilate_iters, "dilation repeat count");

    // ---- synth ----
    auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
    SynthSpec synth_spec;
    std::string synth_out;
    std::string synth_ex = "0,3", synth_ma = "0,3";
    cmd_synth->add_option("--count", synth_spec.image_count, "number of images");
    cmd_synth->add_option("--size", synth_spec.image_size, "image side in pixels");
    cmd_synth->add_option("--seed", synth_spec.seed, "generator seed");
    cmd_synth->add_option("--ex-count", synth_ex, "lo,hi exudate count range");
    cmd_synth->add_option("--ma-count", synth_ma, "lo,hi microaneurysm count range");
    cmd_synth->add_option("--out", synth_out, "output directory");

    // ---- detect ----
    auto* cmd_detect = app.add_subcommand("detect", "produce detection records");
    cmd_detect->require_subcommand(1);
    auto* cmd_blob = cmd_detect->add_subcommand("blob", "classical blob detector on a manifest");
    std::string blob_manifest, blob_out;
    PreprocessParams blob_pre;
    BlobDetectParams blob_params;
    cmd_blob->add_option("--manifest", blob_manifest, "dataset manifest")->required();
    cmd_blob->add_option("--out", blob_out, "output detection record file")->required();
    add_preprocess_flags(cmd_blob, blob_pre);
    cmd_blob->add_option("--bright-threshold", blob_params.bright_threshold, "EX excess threshold");
    cmd_blob->add_option("--dark-threshold", blob_params.dark_threshold, "MA deficit threshold");
    cmd_blob->add_option("--min-area", blob_params.min_area, "minimum blob area in pixels");
    cmd_blob->add_option("--max-area", blob_params.max_area, "maximum blob area in pixels");
    cmd_blob->add_option("--score-scale", blob_params.score_scale, "score = scale * mean excess");

    auto* cmd_ingest = cmd_detect->add_subcommand("ingest", "validate and canonicalize a record file");
    std::string ingest_in, ingest_out;
    cmd_ingest->add_option("--input", ingest_in, "detection record file")->required();
    cmd_ingest->add_option("--out", ingest_out, "canonicalized output file")->required();

    // ---- eval-seg ----
    auto* cmd_eval = app.add_subcommand("eval-seg", "mAP over detection record files");
    std::string eval_pred, eval_gt, eval_thresholds = "0.35,0.5,0.75", eval_csv;
    bool eval_boxes_only = false;
    cmd_eval->add_option("--pred", eval_pred, "predicted detections")->required();
    cmd_eval->add_option("--gt", eval_gt, "ground-truth detections")->required();
    cmd_eval->add_option("--thresholds", eval_thresholds, "comma-separated IOU fractions");
    cmd_eval->add_flag("--boxes-only", eval_boxes_only, "match with boxes even when masks exist");
    cmd_eval->add_option("--csv", eval_csv, "write per-image AP table here");

    // ---- encode ----
    auto* cmd_encode = app.add_subcommand("encode", "dump feature sequences for detections");
    std::string enc_dets, enc_out, enc_model;
    EncoderConfig enc_cfg;
    std::uint64_t enc_seed = 0;
    cmd_encode->add_option("--dets", enc_dets, "detection record file")->required();
    cmd_encode->add_option("--out", enc_out, "output sequence file")->required();
    cmd_encode->add_option("--model", enc_model, "checkpoint supplying mask-branch weights");
    cmd_encode->add_option("--seed", enc_seed, "weight seed when no checkpoint is given");
    add_encoder_flags(cmd_encode, enc_cfg);

    // ---- train ----
    auto* cmd_train = app.add_subcommand("train", "train the severity classifier");
    std::string train_dets, train_manifest, train_out;
    EncoderConfig train_enc;
    TrainHyper train_hyper;
    int train_hidden = 16;
    cmd_train->add_option("--dets", train_dets, "detection record file")->required();
    cmd_train->add_option("--manifest", train_manifest, "manifest carrying severity labels")
        ->required();
    cmd_train->add_option("--out", train_out, "checkpoint path")->required();
    add_encoder_flags(cmd_train, train_enc);
    cmd_train->add_option("--hidden", train_hidden, "LSTM hidden size");
    cmd_train->add_option("--lr", train_hyper.learning_rate, "learning rate");
    cmd_train->add_option("--momentum", train_hyper.momentum, "SGD momentum");
    cmd_train->add_option("--epochs", train_hyper.epochs, "epoch budget");
    cmd_train->add_option("--clip", train_hyper.clip_norm, "gradient norm cap, 0 disables");
    std::string train_class_weights;
    cmd_train->add_option("--class-weights", train_class_weights,
                          "w0,w1,w2 per-class loss weights");
    cmd_train->add_option("--seed", train_hyper.seed, "training seed");
    cmd_train->add_flag("--stop-when-perfect", train_hyper.stop_when_perfect,
                        "stop once training accuracy reaches 1.0");

    // ---- eval-severity ----
    auto* cmd_sev = app.add_subcommand("eval-severity", "confusion matrix for a trained model");
    std::string sev_dets, sev_manifest, sev_model;
    EncoderConfig sev_enc;
    cmd_sev->add_option("--dets", sev_dets, "detection record file")->required();
    cmd_sev->add_option("--manifest", sev_manifest, "manifest carrying severity labels")->required();
    cmd_sev->add_option("--model", sev_model, "checkpoint path")->required();
    add_encoder_flags(cmd_sev, sev_enc);

    // ---- run ----
    auto* cmd_run = app.add_subcommand("run", "end-to-end pipeline from a config file");
    std::string run_config;
    cmd_run->add_option("--config", run_config, "key = value run configuration")->required();

    // ---- overlay ----
    auto* cmd_overlay = app.add_subcommand("overlay", "draw detections onto an image");
    std::string ov_image, ov_dets, ov_gt, ov_out;
    cmd_overlay->add_option("--image", ov_image, "raster to annotate")->required();
    cmd_overlay->add_option("--dets", ov_dets, "detection record file")->required();
    cmd_overlay->add_option("--gt", ov_gt, "ground-truth record file");
    cmd_overlay->add_option("--out", ov_out, "output raster")->required();

    // ---- grad-check ----
    auto* cmd_grad = app.add_subcommand("grad-check", "finite-difference gradient verification");
    std::uint64_t grad_seed = 0;
    int grad_hidden = 8, grad_steps = 3, grad_crop = 8, grad_feature = 6;
    double grad_eps = 1e-5;
    bool grad_masks = true;
    cmd_grad->add_option("--seed", grad_seed, "model and data seed");
    cmd_grad->add_option("--hidden", grad_hidden, "LSTM hidden size");
    cmd_grad->add_option("--steps", grad_steps, "sequence length");
    cmd_grad->add_option("--crop", grad_crop, "mask branch input side");
    cmd_grad->add_option("--feature-dim", grad_feature, "per-step feature width");
    cmd_grad->add_option("--epsilon", grad_eps, "central difference step");
    cmd_grad->add_flag("--no-masks", [&grad_masks](std::int64_t) { grad_masks = false; },
                       "check without the mask branch");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Usage problems (unknown flags, missing arguments) exit 1; --help is 0.
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (cmd_pre->parsed()) {
        pre_params.check();
        std::string out_dir = default_out(pre_out, "preprocessed");
        DatasetManifest manifest = load_manifest(pre_manifest);
        ValidationReport vr = validate_manifest(manifest);
        if (!vr.ok()) {
            for (const auto& issue : vr.issues)
                std::cerr << "entry " << issue.entry << ": " << issue.message << "\n";
            throw ValidationError("manifest failed validation");
        }
        fs::create_directories(fs::path(out_dir) / "images");
        fs::create_directories(fs::path(out_dir) / "masks");
        DatasetManifest processed;
        processed.base_dir = out_dir;
        processed.entries.assign(manifest.entries.size(), ManifestEntry{});
        parallel_for(manifest.entries.size(), workers, [&](std::size_t i) {
            const auto& entry = manifest.entries[i];
            fs::path image_path(entry.image);
            if (!image_path.is_absolute() && !manifest.base_dir.empty())
                image_path = fs::path(manifest.base_dir) / image_path;
            FundusImage raw = load_image(image_path.string());
            NormalizeTransform t = compute_normalization(raw, pre_params);
            FundusImage normalized = apply_normalization(raw, t);
            ManifestEntry out_entry;
            out_entry.image = "images/" + raw.id + ".png";
            out_entry.severity = entry.severity;
            out_entry.severity_raw = entry.severity_raw;
            out_entry.split = entry.split;
            save_image(normalized, (fs::path(out_dir) / out_entry.image).string());
            for (LesionKind kind : {LesionKind::EX, LesionKind::MA}) {
                const auto& paths = kind == LesionKind::EX ? entry.masks_ex : entry.masks_ma;
                auto& out_paths = kind == LesionKind::EX ? out_entry.masks_ex : out_entry.masks_ma;
                for (std::size_t m = 0; m < paths.size(); ++m) {
                    fs::path mp(paths[m]);
                    if (!mp.is_absolute() && !manifest.base_dir.empty())
                        mp = fs::path(manifest.base_dir) / mp;
                    BinaryMask mask = apply_normalization(load_mask(mp.string()), t);
                    bool dilate = kind == LesionKind::MA || pre_params.dilate_both_kinds;
                    if (dilate)
                        mask = dilate_mask(mask, pre_params.dilation_kernel,
                                           pre_params.dilation_iterations);
                    std::string rel = "masks/" + raw.id + (kind == LesionKind::EX ? "_ex" : "_ma") +
                                      "_" + std::to_string(m) + ".png";
                    save_mask(mask, (fs::path(out_dir) / rel).string());
                    out_paths.push_back(rel);
                }
            }
            processed.entries[i] = std::move(out_entry);
        });
        std::string out_manifest = (fs::path(out_dir) / "manifest.json").string();
        save_manifest(processed, out_manifest);
        if (machine)
            std::cout << json{{"manifest", out_manifest}, {"images", processed.entries.size()}}.dump()
                      << "\n";
        else
            std::cout << "wrote " << processed.entries.size() << " normalized images under "
                      << out_dir << "\n";
        return 0;
    }

    if (cmd_split->parsed()) {
        std::string out_dir = default_out(split_out, "instances");
        LesionKind kind = lesion_kind_from_string(split_kind);
        BinaryMask mask = load_mask(split_mask);
        if (split_dilate_kernel > 0)
            mask = dilate_mask(mask, split_dilate_kernel, split_dilate_iters);
        auto instances = split_instances(mask, kind);
        fs::create_directories(out_dir);
        std::string stem = fs::path(split_mask).stem().string();
        DetectionSet set{stem, {}};
        for (std::size_t k = 0; k < instances.size(); ++k) {
            char name[64];
            std::snprintf(name, sizeof(name), "%s_inst_%03zu.png", stem.c_str(), k);
            save_mask(instances[k].mask, (fs::path(out_dir) / name).string());
            set.detections.push_back(
                Detection::make(kind, 1.0, instances[k].box, std::move(instances[k].mask)));
        }
        save_detections({set}, (fs::path(out_dir) / (stem + ".jsonl")).string());
        if (machine)
            std::cout << json{{"instances", instances.size()}, {"out", out_dir}}.dump() << "\n";
        else
            std::cout << instances.size() << " instance(s) written under " << out_dir << "\n";
        return 0;
    }

    if (cmd_synth->parsed()) {
        auto [exlo, exhi] = parse_int_pair_cli(synth_ex);
        auto [malo, mahi] = parse_int_pair_cli(synth_ma);
        synth_spec.ex_count_range = {exlo, exhi};
        synth_spec.ma_count_range = {malo, mahi};
        std::string out_dir = default_out(synth_out, "synth");
        std::string manifest = write_synthetic_dataset(synth_spec, out_dir, ".png", workers);
        if (machine)
            std::cout << json{{"manifest", manifest}, {"images", synth_spec.image_count}}.dump()
                      << "\n";
        else
            std::cout << "wrote " << synth_spec.image_count << " images; manifest at " << manifest
                      << "\n";
        return 0;
    }

    if (cmd_blob->parsed()) {
        DatasetManifest manifest = load_manifest(blob_manifest);
        std::vector<DetectionSet> sets(manifest.entries.size());
        parallel_for(manifest.entries.size(), workers, [&](std::size_t i) {
            fs::path image_path(manifest.entries[i].image);
            if (!image_path.is_absolute() && !manifest.base_dir.empty())
                image_path = fs::path(manifest.base_dir) / image_path;
            FundusImage raw = load_image(image_path.string());
            FundusImage normalized = normalize_image(raw, blob_pre);
            sets[i] = blob_detect(normalized, blob_params);
        });
        save_detections(sets, blob_out);
        std::size_t total = 0;
        for (const auto& s : sets) total += s.detections.size();
        if (machine)
            std::cout << json{{"images", sets.size()}, {"detections", total}, {"out", blob_out}}.dump()
                      << "\n";
        else
            std::cout << total << " detection(s) over " << sets.size() << " image(s) -> "
                      << blob_out << "\n";
        return 0;
    }

    if (cmd_ingest->parsed()) {
        auto sets = ingest_detections(ingest_in);
        save_detections(sets, ingest_out);
        std::size_t total = 0;
        for (const auto& s : sets) total += s.detections.size();
        if (machine)
            std::cout << json{{"images", sets.size()}, {"detections", total}}.dump() << "\n";
        else
            std::cout << "ingested " << total << " detection(s) over " << sets.size()
                      << " image(s)\n";
        return 0;
    }

    if (cmd_eval->parsed()) {
        auto thresholds = parse_thresholds(eval_thresholds);
        auto pairs = pair_by_id(load_detections(eval_pred), load_detections(eval_gt));
        std::vector<double> maps;
        for (double t : thresholds)
            maps.push_back(mean_average_precision(pairs, t, !eval_boxes_only));
        if (!eval_csv.empty()) {
            SplitResults results;
            results[Split::Test] = pairs;
            EvalReport report = phase1_report(results, thresholds, !eval_boxes_only);
            std::ofstream csv(eval_csv, std::ios::binary);
            csv << render_per_image_csv(report);
        }
        if (machine) {
            json o;
            o["thresholds"] = thresholds;
            json values = json::array();
            for (double m : maps) values.push_back(json::parse(format_fixed4(m)));
            o["map"] = values;
            std::cout << o.dump() << "\n";
        } else {
            for (std::size_t k = 0; k < thresholds.size(); ++k)
                std::cout << "mAP_" << static_cast<int>(std::lround(thresholds[k] * 100)) << " "
                          << format_fixed4(maps[k]) << "\n";
        }
        return 0;
    }

    if (cmd_encode->parsed()) {
        enc_cfg.check();
        MaskEncoderParams enc_weights = [&] {
            if (!enc_model.empty()) {
                SeverityModel m = load_model(enc_model);
                return m.mask_encoder;
            }
            Rng rng = Rng::stream(enc_seed, 1);
            return MaskEncoderParams::init(enc_cfg.mask_crop_size, enc_cfg.feature_dim, rng);
        }();
        auto sets = load_detections(enc_dets);
        std::vector<FeatureSequence> seqs;
        for (const auto& set : sets) seqs.push_back(build_sequence(set, enc_cfg));
        std::ofstream out(enc_out, std::ios::binary);
        if (!out) throw UsageError("cannot write " + enc_out);
        out << serialize_sequences(seqs, enc_cfg, enc_weights);
        if (machine)
            std::cout << json{{"sequences", seqs.size()}, {"out", enc_out}}.dump() << "\n";
        else
            std::cout << seqs.size() << " sequence(s) -> " << enc_out << "\n";
        return 0;
    }

    if (cmd_train->parsed()) {
        train_enc.check();
        if (!train_class_weights.empty()) {
            std::istringstream ws(train_class_weights);
            std::array<double, 3> weights{};
            char comma = 0;
            if (!(ws >> weights[0] >> comma >> weights[1] >> comma >> weights[2]))
                throw ValidationError("expected w0,w1,w2 for --class-weights");
            train_hyper.class_weights = weights;
        }
        auto sets = load_detections(train_dets);
        DatasetManifest manifest = load_manifest(train_manifest);
        auto labels = labels_from_manifest(manifest);
        auto splits = splits_from_manifest(manifest);
        std::vector<std::pair<FeatureSequence, SeverityGrade>> dataset;
        for (const auto& set : sets) {
            auto it = labels.find(set.image_id);
            if (it == labels.end())
                throw ConfigError("no severity label for image " + set.image_id);
            auto sp = splits.find(set.image_id);
            if (sp != splits.end() && sp->second != Split::Train) continue;
            dataset.push_back({build_sequence(set, train_enc), it->second});
        }
        SeverityModel model =
            SeverityModel::init(train_enc.feature_dim, train_hidden, train_enc.mask_crop_size,
                                train_enc.combine, train_hyper.seed);
        TrainHistory history = train(model, dataset, train_hyper);
        save_model(model, train_out);
        const EpochStats& last = history.epochs.back();
        if (machine)
            std::cout << json{{"epochs", history.epochs.size()},
                              {"final_loss", last.mean_loss},
                              {"final_train_accuracy", last.train_accuracy},
                              {"checkpoint", train_out}}
                             .dump()
                      << "\n";
        else
            std::cout << "trained " << history.epochs.size() << " epoch(s); final loss "
                      << format_fixed4(last.mean_loss) << ", train accuracy "
                      << format_fixed4(last.train_accuracy) << " -> " << train_out << "\n";
        return 0;
    }

    if (cmd_sev->parsed()) {
        sev_enc.check();
        SeverityModel model = load_model(sev_model);
        auto sets = load_detections(sev_dets);
        DatasetManifest manifest = load_manifest(sev_manifest);
        auto labels = labels_from_manifest(manifest);
        auto splits = splits_from_manifest(manifest);
        std::vector<SeverityGrade> truth, predicted;
        for (const auto& set : sets) {
            auto it = labels.find(set.image_id);
            if (it == labels.end()) continue;
            auto sp = splits.find(set.image_id);
            if (sp != splits.end() && sp->second != Split::Test) continue;
            truth.push_back(it->second);
            predicted.push_back(
                predict_severity(model, build_sequence(set, sev_enc)).grade);
        }
        ConfusionMatrix cm = confusion_from_labels(truth, predicted);
        double acc = accuracy(cm);
        if (machine) {
            json rows = json::array();
            for (int t = 0; t < 3; ++t) {
                json row = json::array();
                for (int p = 0; p < 3; ++p) row.push_back(cm.at(t, p));
                rows.push_back(std::move(row));
            }
            std::cout << json{{"accuracy", json::parse(format_fixed4(acc))}, {"confusion", rows}}.dump()
                      << "\n";
        } else {
            std::cout << render_confusion_text(cm, acc);
        }
        return 0;
    }

    if (cmd_run->parsed()) {
        RunConfig cfg = load_run_config(run_config);
        cfg.workers = workers;
        RunArtifacts artifacts = run_end_to_end(cfg);
        if (machine) {
            json o;
            o["out_dir"] = cfg.out_dir;
            o["artifacts"] = artifacts.files.size();
            json p2 = json::array();
            for (const auto& r : artifacts.phase2)
                p2.push_back({{"ablation", to_string(r.ablation)},
                              {"accuracy", json::parse(format_fixed4(r.accuracy))}});
            o["phase2"] = p2;
            std::cout << o.dump() << "\n";
        } else {
            std::cout << render_report_text(artifacts.phase1);
            for (const auto& r : artifacts.phase2)
                std::cout << to_string(r.ablation) << " accuracy "
                          << format_fixed4(r.accuracy) << "\n";
            std::cout << artifacts.files.size() << " artifact(s) under " << cfg.out_dir << "\n";
        }
        return 0;
    }

    if (cmd_overlay->parsed()) {
        FundusImage img = load_image(ov_image);
        auto sets = load_detections(ov_dets);
        DetectionSet dets{img.id, {}};
        for (const auto& s : sets)
            if (s.image_id == img.id) dets = s;
        std::optional<DetectionSet> gt;
        if (!ov_gt.empty()) {
            for (const auto& s : load_detections(ov_gt))
                if (s.image_id == img.id) gt = s;
        }
        FundusImage out = render_overlay(img, dets, gt ? &*gt : nullptr);
        save_image(out, ov_out);
        if (machine)
            std::cout << json{{"out", ov_out}, {"detections", dets.detections.size()}}.dump() << "\n";
        else
            std::cout << "overlay with " << dets.detections.size() << " detection(s) -> " << ov_out
                      << "\n";
        return 0;
    }

    if (cmd_grad->parsed()) {
        SeverityModel model = SeverityModel::init(grad_feature, grad_hidden, grad_crop,
                                                  MaskCombine::Add, grad_seed);
        Rng rng = Rng::stream(grad_seed, 99);
        FeatureSequence seq;
        seq.feature_dim = grad_feature;
        seq.image_id = "grad-check";
        for (int t = 0; t < grad_steps; ++t) {
            FeatureStep step;
            for (int k = 0; k < grad_feature; ++k) step.base.push_back(rng.uniform(-1.0, 1.0));
            if (grad_masks) {
                std::vector<double> crop(static_cast<std::size_t>(grad_crop) * grad_crop);
                for (auto& v : crop) v = rng.next_double() < 0.35 ? 1.0 : 0.0;
                step.crop = std::move(crop);
            }
            seq.steps.push_back(std::move(step));
        }
        SeverityGrade label = grade_from_index(static_cast<int>(rng.next_below(3)));
        double err = grad_check(model, seq, label, grad_eps, grad_seed);
        if (machine)
            std::cout << json{{"max_relative_error", err}, {"epsilon", grad_eps}}.dump() << "\n";
        else
            std::cout << "max relative error " << err << " (epsilon " << grad_eps << ")\n";
        if (!(err < 1e-4)) throw NumericError("gradient check failed: max relative error too large");
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
