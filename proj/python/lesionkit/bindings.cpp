#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <map>

#include "lesionkit/detect.hpp"
#include "lesionkit/imageproc.hpp"
#include "lesionkit/neural.hpp"
#include "lesionkit/pipeline.hpp"
#include "lesionkit/segmetrics.hpp"

namespace py = pybind11;
using namespace lesionkit;

namespace {

BinaryMask mask_from_array(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw ValidationError("mask array must be 2-D");
    BinaryMask mask(static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(0)));
    auto r = arr.unchecked<2>();
    for (py::ssize_t y = 0; y < arr.shape(0); ++y)
        for (py::ssize_t x = 0; x < arr.shape(1); ++x)
            if (r(y, x)) mask.set(static_cast<int>(x), static_cast<int>(y));
    return mask;
}

py::array_t<std::uint8_t> mask_to_array(const BinaryMask& mask) {
    py::array_t<std::uint8_t> arr({mask.height(), mask.width()});
    auto w = arr.mutable_unchecked<2>();
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) w(y, x) = mask.get(x, y) ? 1 : 0;
    return arr;
}

FundusImage image_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr,
                             const std::string& id) {
    if (arr.ndim() != 3 || arr.shape(2) != 3)
        throw ValidationError("image array must be HxWx3");
    FundusImage img(id, static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(0)));
    auto r = arr.unchecked<3>();
    for (py::ssize_t y = 0; y < arr.shape(0); ++y)
        for (py::ssize_t x = 0; x < arr.shape(1); ++x)
            for (int c = 0; c < 3; ++c)
                img.at(static_cast<int>(x), static_cast<int>(y), c) = r(y, x, c);
    return img;
}

py::array_t<float> image_to_array(const FundusImage& img) {
    py::array_t<float> arr({img.height, img.width, 3});
    auto w = arr.mutable_unchecked<3>();
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) w(y, x, c) = img.at(x, y, c);
    return arr;
}

BoundingBox box_from_tuple(const std::array<int, 4>& t) {
    return BoundingBox{t[0], t[1], t[2], t[3]};
}

py::dict detection_to_dict(const Detection& det) {
    py::dict d;
    d["kind"] = std::string(to_string(det.kind));
    d["score"] = det.score;
    d["box"] = py::make_tuple(det.box.x_min, det.box.y_min, det.box.x_max, det.box.y_max);
    if (det.mask) d["mask"] = mask_to_array(*det.mask);
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "lesionkit C++ core";

    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<ComputeError>(m, "ComputeError", PyExc_RuntimeError);

    m.def("iou_box",
          [](const std::array<int, 4>& a, const std::array<int, 4>& b) {
              return iou_box(box_from_tuple(a), box_from_tuple(b));
          },
          py::arg("a"), py::arg("b"),
          "IOU of two half-open integer boxes (x_min, y_min, x_max, y_max)");

    m.def("iou_mask",
          [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a,
             const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& b) {
              return iou_mask(mask_from_array(a), mask_from_array(b));
          },
          py::arg("a"), py::arg("b"));

    m.def("accuracy",
          [](const std::array<std::array<long long, 3>, 3>& counts) {
              ConfusionMatrix cm;
              for (int t = 0; t < 3; ++t)
                  for (int p = 0; p < 3; ++p) cm.at(t, p) = counts[t][p];
              return accuracy(cm);
          },
          py::arg("confusion"), "trace / total for a 3x3 confusion matrix");

    m.def("confusion_from_labels",
          [](const std::vector<int>& truth, const std::vector<int>& predicted) {
              std::vector<SeverityGrade> t, p;
              for (int g : truth) t.push_back(grade_from_index(g));
              for (int g : predicted) p.push_back(grade_from_index(g));
              ConfusionMatrix cm = confusion_from_labels(t, p);
              std::array<std::array<long long, 3>, 3> out{};
              for (int a = 0; a < 3; ++a)
                  for (int b = 0; b < 3; ++b) out[a][b] = cm.at(a, b);
              return out;
          },
          py::arg("truth"), py::arg("predicted"));

    m.def("map_raw_severity",
          [](int raw) { return grade_index(map_raw_severity(raw)); }, py::arg("raw"),
          "collapse a 0-4 label to the 3-class grade");

    m.def("dilate_mask",
          [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask,
             int kernel, int iterations) {
              return mask_to_array(dilate_mask(mask_from_array(mask), kernel, iterations));
          },
          py::arg("mask"), py::arg("kernel") = 5, py::arg("iterations") = 2);

    m.def("split_instances",
          [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
              py::list out;
              for (const auto& inst : split_instances(mask_from_array(mask), LesionKind::EX))
                  out.append(py::make_tuple(mask_to_array(inst.mask),
                                            py::make_tuple(inst.box.x_min, inst.box.y_min,
                                                           inst.box.x_max, inst.box.y_max)));
              return out;
          },
          py::arg("mask"), "8-connected components with tight boxes");

    m.def("tight_bbox",
          [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
              BoundingBox b = tight_bbox(mask_from_array(mask));
              return py::make_tuple(b.x_min, b.y_min, b.x_max, b.y_max);
          },
          py::arg("mask"));

    m.def("encode_mask_rle",
          [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
              return encode_mask_rle(mask_from_array(mask));
          },
          py::arg("mask"));

    m.def("decode_mask_rle", [](const std::string& rle) { return mask_to_array(decode_mask_rle(rle)); },
          py::arg("rle"));

    m.def("eval_detection_files",
          [](const std::string& pred_path, const std::string& gt_path,
             const std::vector<double>& thresholds, bool use_masks) {
              auto preds = load_detections(pred_path);
              auto gts = load_detections(gt_path);
              std::map<std::string, std::size_t> index;
              std::vector<std::pair<DetectionSet, DetectionSet>> pairs;
              for (const auto& gt : gts) {
                  index[gt.image_id] = pairs.size();
                  pairs.push_back({DetectionSet{gt.image_id, {}}, gt});
              }
              for (const auto& pred : preds) {
                  auto it = index.find(pred.image_id);
                  if (it == index.end())
                      pairs.push_back({pred, DetectionSet{pred.image_id, {}}});
                  else
                      pairs[it->second].first = pred;
              }
              std::vector<double> out;
              for (double t : thresholds) out.push_back(mean_average_precision(pairs, t, use_masks));
              return out;
          },
          py::arg("pred_path"), py::arg("gt_path"),
          py::arg("thresholds") = std::vector<double>{0.35, 0.50, 0.75}, py::arg("use_masks") = true,
          "mAP per threshold over two detection record files");

    m.def("normalize_image",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& img,
             int target_size, double blur_radius, double gain, bool circular_crop) {
              PreprocessParams p;
              p.target_size = target_size;
              p.contrast_blur_radius = blur_radius;
              p.contrast_gain = gain;
              p.circular_crop = circular_crop;
              return image_to_array(normalize_image(image_from_array(img, "array"), p));
          },
          py::arg("image"), py::arg("target_size") = 1024, py::arg("blur_radius") = 0.1,
          py::arg("gain") = 4.0, py::arg("circular_crop") = true);

    m.def("blob_detect",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& img,
             double bright_threshold, double dark_threshold, int min_area, int max_area,
             double score_scale) {
              BlobDetectParams p;
              p.bright_threshold = bright_threshold;
              p.dark_threshold = dark_threshold;
              p.min_area = min_area;
              p.max_area = max_area;
              p.score_scale = score_scale;
              DetectionSet set = blob_detect(image_from_array(img, "array"), p);
              py::list out;
              for (const auto& det : set.detections) out.append(detection_to_dict(det));
              return out;
          },
          py::arg("image"), py::arg("bright_threshold") = 0.22, py::arg("dark_threshold") = 0.30,
          py::arg("min_area") = 4, py::arg("max_area") = 100000, py::arg("score_scale") = 4.0);

    m.def("generate_synthetic",
          [](int count, int size, std::uint64_t seed, const std::array<int, 2>& ex_count,
             const std::array<int, 2>& ma_count) {
              SynthSpec spec;
              spec.image_count = count;
              spec.image_size = size;
              spec.seed = seed;
              spec.ex_count_range = ex_count;
              spec.ma_count_range = ma_count;
              py::list out;
              for (const auto& sample : generate_synthetic(spec)) {
                  py::dict d;
                  d["image"] = image_to_array(sample.image);
                  d["image_id"] = sample.image.id;
                  d["severity"] = grade_index(sample.severity);
                  py::list dets;
                  for (const auto& det : sample.ground_truth.detections)
                      dets.append(detection_to_dict(det));
                  d["detections"] = dets;
                  out.append(d);
              }
              return out;
          },
          py::arg("count") = 5, py::arg("size") = 128, py::arg("seed") = 0,
          py::arg("ex_count") = std::array<int, 2>{0, 3},
          py::arg("ma_count") = std::array<int, 2>{0, 3});

    m.def("write_synthetic_dataset",
          [](const std::string& out_dir, int count, int size, std::uint64_t seed,
             const std::array<int, 2>& ex_count, const std::array<int, 2>& ma_count, int workers) {
              SynthSpec spec;
              spec.image_count = count;
              spec.image_size = size;
              spec.seed = seed;
              spec.ex_count_range = ex_count;
              spec.ma_count_range = ma_count;
              return write_synthetic_dataset(spec, out_dir, ".png", workers);
          },
          py::arg("out_dir"), py::arg("count") = 5, py::arg("size") = 128, py::arg("seed") = 0,
          py::arg("ex_count") = std::array<int, 2>{0, 3},
          py::arg("ma_count") = std::array<int, 2>{0, 3}, py::arg("workers") = 1);

    m.def("train_severity",
          [](const std::string& dets_path, const std::string& manifest_path,
             const std::string& checkpoint_out, int hidden, int epochs, double lr, double momentum,
             std::uint64_t seed, bool use_masks, bool normalize_boxes, int image_size,
             int crop_size, bool stop_when_perfect) {
              EncoderConfig enc;
              enc.use_masks = use_masks;
              enc.normalize_boxes = normalize_boxes;
              enc.image_size = image_size;
              enc.mask_crop_size = crop_size;
              enc.check();
              auto sets = load_detections(dets_path);
              DatasetManifest manifest = load_manifest(manifest_path);
              std::map<std::string, SeverityGrade> labels;
              for (const auto& entry : manifest.entries) {
                  std::string id = std::filesystem::path(entry.image).stem().string();
                  if (entry.severity) labels[id] = *entry.severity;
                  else if (entry.severity_raw) labels[id] = map_raw_severity(*entry.severity_raw);
              }
              std::vector<std::pair<FeatureSequence, SeverityGrade>> dataset;
              for (const auto& set : sets) {
                  auto it = labels.find(set.image_id);
                  if (it == labels.end())
                      throw ConfigError("no severity label for image " + set.image_id);
                  dataset.push_back({build_sequence(set, enc), it->second});
              }
              SeverityModel model =
                  SeverityModel::init(enc.feature_dim, hidden, enc.mask_crop_size, enc.combine, seed);
              TrainHyper hyper;
              hyper.learning_rate = lr;
              hyper.momentum = momentum;
              hyper.epochs = epochs;
              hyper.seed = seed;
              hyper.stop_when_perfect = stop_when_perfect;
              TrainHistory history = train(model, dataset, hyper);
              if (!checkpoint_out.empty()) save_model(model, checkpoint_out);
              py::dict out;
              out["epochs"] = history.epochs.size();
              out["final_loss"] = history.epochs.empty() ? 0.0 : history.epochs.back().mean_loss;
              out["final_train_accuracy"] =
                  history.epochs.empty() ? 0.0 : history.epochs.back().train_accuracy;
              return out;
          },
          py::arg("dets_path"), py::arg("manifest_path"), py::arg("checkpoint_out") = "",
          py::arg("hidden") = 16, py::arg("epochs") = 200, py::arg("lr") = 0.05,
          py::arg("momentum") = 0.9, py::arg("seed") = 0, py::arg("use_masks") = false,
          py::arg("normalize_boxes") = true, py::arg("image_size") = 1024,
          py::arg("crop_size") = 32, py::arg("stop_when_perfect") = true);

    m.def("grad_check",
          [](std::uint64_t seed, int hidden, int steps, int crop, int feature_dim, double epsilon,
             bool masks) {
              SeverityModel model =
                  SeverityModel::init(feature_dim, hidden, crop, MaskCombine::Add, seed);
              Rng rng = Rng::stream(seed, 99);
              FeatureSequence seq;
              seq.feature_dim = feature_dim;
              for (int t = 0; t < steps; ++t) {
                  FeatureStep step;
                  for (int k = 0; k < feature_dim; ++k) step.base.push_back(rng.uniform(-1.0, 1.0));
                  if (masks) {
                      std::vector<double> cropv(static_cast<std::size_t>(crop) * crop);
                      for (auto& v : cropv) v = rng.next_double() < 0.35 ? 1.0 : 0.0;
                      step.crop = std::move(cropv);
                  }
                  seq.steps.push_back(std::move(step));
              }
              SeverityGrade label = grade_from_index(static_cast<int>(rng.next_below(3)));
              return grad_check(model, seq, label, epsilon, seed);
          },
          py::arg("seed") = 0, py::arg("hidden") = 8, py::arg("steps") = 3, py::arg("crop") = 8,
          py::arg("feature_dim") = 6, py::arg("epsilon") = 1e-5, py::arg("masks") = true,
          "max relative error between analytic and central-difference gradients");

    m.def("run_end_to_end",
          [](const std::string& config_path) {
              RunConfig cfg = load_run_config(config_path);
              RunArtifacts artifacts = run_end_to_end(cfg);
              py::dict out;
              out["out_dir"] = cfg.out_dir;
              out["artifact_count"] = artifacts.files.size();
              py::list phase2;
              for (const auto& r : artifacts.phase2) {
                  py::dict d;
                  d["ablation"] = std::string(to_string(r.ablation));
                  d["accuracy"] = r.accuracy;
                  phase2.append(d);
              }
              out["phase2"] = phase2;
              return out;
          },
          py::arg("config_path"));
}
