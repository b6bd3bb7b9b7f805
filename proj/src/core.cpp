#include "lesionkit/core.hpp"

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "lesionkit/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lesionkit {

const char* to_string(LesionKind k) { return k == LesionKind::EX ? "EX" : "MA"; }

LesionKind lesion_kind_from_string(const std::string& s) {
    if (s == "EX") return LesionKind::EX;
    if (s == "MA") return LesionKind::MA;
    throw ParseError("unknown lesion kind: " + s);
}

SeverityGrade grade_from_index(int i) {
    if (i < 0 || i > 2) throw ValidationError("severity grade out of range: " + std::to_string(i));
    return static_cast<SeverityGrade>(i);
}

BinaryMask::BinaryMask(int width, int height) : width_(width), height_(height) {
    if (width < 1 || height < 1) throw ValidationError("mask dimensions must be positive");
    words_.assign((static_cast<std::size_t>(width) * height + 63) / 64, 0);
}

std::size_t BinaryMask::count() const {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
}

bool BinaryMask::any() const {
    for (auto w : words_)
        if (w) return true;
    return false;
}

std::size_t BinaryMask::intersection_count(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_size(b)) throw ValidationError("mask dimensions differ");
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.words_.size(); ++i)
        n += static_cast<std::size_t>(std::popcount(a.words_[i] & b.words_[i]));
    return n;
}

std::size_t BinaryMask::union_count(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_size(b)) throw ValidationError("mask dimensions differ");
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.words_.size(); ++i)
        n += static_cast<std::size_t>(std::popcount(a.words_[i] | b.words_[i]));
    return n;
}

BoundingBox tight_bbox(const BinaryMask& mask) {
    int x0 = mask.width(), y0 = mask.height(), x1 = -1, y1 = -1;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask.get(x, y)) {
                if (x < x0) x0 = x;
                if (x > x1) x1 = x;
                if (y < y0) y0 = y;
                if (y > y1) y1 = y;
            }
    if (x1 < 0) throw DegenerateInputError("tight_bbox of an empty mask");
    return BoundingBox{x0, y0, x1 + 1, y1 + 1};
}

Detection Detection::make(LesionKind kind, double score, BoundingBox box,
                          std::optional<BinaryMask> mask) {
    if (!(score >= 0.0 && score <= 1.0))
        throw ValidationError("detection score out of [0,1]: " + std::to_string(score));
    if (mask) {
        if (!mask->any()) throw ValidationError("detection mask has no set bits");
        box = tight_bbox(*mask);
    }
    if (!box.valid()) throw ValidationError("invalid bounding box");
    return Detection{kind, score, box, std::move(mask)};
}

FundusImage::FundusImage(std::string id_, int w, int h, float fill)
    : id(std::move(id_)), width(w), height(h) {
    if (w < 1 || h < 1) throw ValidationError("image dimensions must be positive");
    pixels.assign(static_cast<std::size_t>(w) * h * 3, fill);
}

SeverityMapping default_severity_mapping() {
    return {SeverityGrade::Healthy, SeverityGrade::Medium, SeverityGrade::Medium,
            SeverityGrade::Severe, SeverityGrade::Severe};
}

SeverityGrade map_raw_severity(int raw, const SeverityMapping& table) {
    if (raw < 0 || raw > 4)
        throw ValidationError("raw severity out of range 0-4: " + std::to_string(raw));
    return table[static_cast<std::size_t>(raw)];
}

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        default: return "test";
    }
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test") return Split::Test;
    throw ParseError("unknown split: " + s);
}

// ----- manifest ---------------------------------------------------------------

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open manifest: " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("manifest " + path + ": " + e.what());
    }
    if (!doc.is_array()) throw ParseError("manifest " + path + ": expected a top-level array");

    DatasetManifest m;
    m.base_dir = fs::path(path).parent_path().string();
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const json& e = doc[i];
        std::string where = "manifest " + path + " entry " + std::to_string(i);
        if (!e.is_object() || !e.contains("image"))
            throw ParseError(where + ": missing image field");
        ManifestEntry entry;
        entry.image = e.at("image").get<std::string>();
        if (e.contains("masks_ex")) entry.masks_ex = e.at("masks_ex").get<std::vector<std::string>>();
        if (e.contains("masks_ma")) entry.masks_ma = e.at("masks_ma").get<std::vector<std::string>>();
        if (e.contains("severity_raw") && !e.at("severity_raw").is_null())
            entry.severity_raw = e.at("severity_raw").get<int>();
        if (e.contains("severity") && !e.at("severity").is_null()) {
            int g = e.at("severity").get<int>();
            if (g < 0 || g > 2) throw ParseError(where + ": severity out of range 0-2");
            entry.severity = grade_from_index(g);
        }
        if (e.contains("split") && !e.at("split").is_null())
            entry.split = split_from_string(e.at("split").get<std::string>());
        m.entries.push_back(std::move(entry));
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    json doc = json::array();
    for (const auto& e : manifest.entries) {
        json o;
        o["image"] = e.image;
        if (!e.masks_ex.empty()) o["masks_ex"] = e.masks_ex;
        if (!e.masks_ma.empty()) o["masks_ma"] = e.masks_ma;
        if (e.severity_raw) o["severity_raw"] = *e.severity_raw;
        if (e.severity) o["severity"] = grade_index(*e.severity);
        if (e.split) o["split"] = to_string(*e.split);
        doc.push_back(std::move(o));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write manifest: " + path);
    out << doc.dump(2) << "\n";
}

ValidationReport validate_manifest(const DatasetManifest& manifest) {
    ValidationReport report;
    auto resolve = [&](const std::string& p) {
        fs::path q(p);
        if (q.is_absolute() || manifest.base_dir.empty()) return q;
        return fs::path(manifest.base_dir) / q;
    };
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        std::optional<std::pair<int, int>> image_dims;
        auto check_file = [&](const std::string& p, bool is_image) {
            fs::path full = resolve(p);
            if (!fs::exists(full)) {
                report.issues.push_back({i, "missing file: " + p});
                return;
            }
            try {
                auto [w, h] = probe_raster_dims(full.string());
                if (is_image)
                    image_dims = {w, h};
                else if (image_dims && (w != image_dims->first || h != image_dims->second)) {
                    std::ostringstream msg;
                    msg << "dimension mismatch: " << p << " is " << w << "x" << h
                        << " but image is " << image_dims->first << "x" << image_dims->second;
                    report.issues.push_back({i, msg.str()});
                }
            } catch (const std::exception& ex) {
                report.issues.push_back({i, std::string("unreadable raster ") + p + ": " + ex.what()});
            }
        };
        check_file(e.image, true);
        for (const auto& p : e.masks_ex) check_file(p, false);
        for (const auto& p : e.masks_ma) check_file(p, false);
        if (e.severity_raw && (*e.severity_raw < 0 || *e.severity_raw > 4))
            report.issues.push_back(
                {i, "raw severity out of range 0-4: " + std::to_string(*e.severity_raw)});
    }
    return report;
}

// ----- detection record format -------------------------------------------------

std::string encode_mask_rle(const BinaryMask& mask) {
    std::ostringstream out;
    out << mask.width() << "," << mask.height() << ";";
    std::size_t total = static_cast<std::size_t>(mask.width()) * mask.height();
    bool current = false;  // runs start with 0s
    std::size_t run = 0;
    bool first = true;
    auto flush = [&] {
        if (!first) out << ",";
        out << run;
        first = false;
    };
    for (std::size_t i = 0; i < total; ++i) {
        bool bit = mask.get(static_cast<int>(i % mask.width()), static_cast<int>(i / mask.width()));
        if (bit == current) {
            ++run;
        } else {
            flush();
            current = bit;
            run = 1;
        }
    }
    flush();
    return out.str();
}

BinaryMask decode_mask_rle(const std::string& rle) {
    auto semi = rle.find(';');
    auto comma = rle.find(',');
    if (semi == std::string::npos || comma == std::string::npos || comma > semi)
        throw ParseError("mask_rle missing W,H; header");
    int w = 0, h = 0;
    try {
        w = std::stoi(rle.substr(0, comma));
        h = std::stoi(rle.substr(comma + 1, semi - comma - 1));
    } catch (const std::exception&) {
        throw ParseError("mask_rle has a malformed header: " + rle.substr(0, semi + 1));
    }
    if (w < 1 || h < 1) throw ParseError("mask_rle dimensions must be positive");
    BinaryMask mask(w, h);
    std::size_t total = static_cast<std::size_t>(w) * h;
    std::size_t pos = 0;
    bool current = false;
    std::istringstream runs(rle.substr(semi + 1));
    std::string token;
    while (std::getline(runs, token, ',')) {
        long long run = 0;
        try {
            run = std::stoll(token);
        } catch (const std::exception&) {
            throw ParseError("mask_rle has a non-integer run: " + token);
        }
        if (run < 0) throw ParseError("mask_rle has a negative run");
        if (pos + static_cast<std::size_t>(run) > total)
            throw ParseError("mask_rle runs exceed declared W*H");
        if (current)
            for (long long k = 0; k < run; ++k) {
                std::size_t i = pos + static_cast<std::size_t>(k);
                mask.set(static_cast<int>(i % w), static_cast<int>(i / w));
            }
        pos += static_cast<std::size_t>(run);
        current = !current;
    }
    if (pos != total) throw ParseError("mask_rle runs do not cover declared W*H");
    return mask;
}

std::string serialize_detections(const std::vector<DetectionSet>& sets) {
    std::ostringstream out;
    for (const auto& set : sets) {
        for (const auto& det : set.detections) {
            json o;
            o["image_id"] = set.image_id;
            o["kind"] = to_string(det.kind);
            o["score"] = det.score;
            o["box"] = {det.box.x_min, det.box.y_min, det.box.x_max, det.box.y_max};
            if (det.mask) o["mask_rle"] = encode_mask_rle(*det.mask);
            out << o.dump() << "\n";
        }
        if (set.detections.empty()) {
            // Keep empty sets visible so a round trip preserves them.
            json o;
            o["image_id"] = set.image_id;
            o["empty"] = true;
            out << o.dump() << "\n";
        }
    }
    return out.str();
}

void save_detections(const std::vector<DetectionSet>& sets, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write detections: " + path);
    out << serialize_detections(sets);
}

std::vector<DetectionSet> parse_detections(const std::string& text) {
    std::vector<DetectionSet> sets;
    std::map<std::string, std::size_t> index;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& msg) {
        throw ParseError("detections line " + std::to_string(line_no) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json o;
        try {
            o = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(e.what());
        }
        if (!o.is_object() || !o.contains("image_id")) fail("missing image_id");
        std::string id = o.at("image_id").get<std::string>();
        auto [it, inserted] = index.try_emplace(id, sets.size());
        if (inserted) sets.push_back(DetectionSet{id, {}});
        DetectionSet& set = sets[it->second];
        if (o.value("empty", false)) continue;
        try {
            LesionKind kind = lesion_kind_from_string(o.at("kind").get<std::string>());
            double score = o.at("score").get<double>();
            auto box_arr = o.at("box");
            if (!box_arr.is_array() || box_arr.size() != 4) fail("box must have 4 entries");
            BoundingBox box{box_arr[0].get<int>(), box_arr[1].get<int>(), box_arr[2].get<int>(),
                            box_arr[3].get<int>()};
            std::optional<BinaryMask> mask;
            if (o.contains("mask_rle")) mask = decode_mask_rle(o.at("mask_rle").get<std::string>());
            set.detections.push_back(Detection::make(kind, score, box, std::move(mask)));
        } catch (const json::exception& e) {
            fail(e.what());
        } catch (const UsageError& e) {
            fail(e.what());
        }
    }
    for (const auto& set : sets) {
        const BinaryMask* first = nullptr;
        for (const auto& det : set.detections)
            if (det.mask) {
                if (!first)
                    first = &*det.mask;
                else if (!first->same_size(*det.mask))
                    throw ParseError("masks for image " + set.image_id +
                                     " have differing dimensions");
            }
    }
    return sets;
}

std::vector<DetectionSet> load_detections(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open detections: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_detections(buf.str());
}

}  // namespace lesionkit
