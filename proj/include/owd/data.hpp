#pragma once

// Dataset manifests, annotation parsing, incremental-task and partial-label
// splitting, pixel-only augmentations, and the synthetic shapes generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "owd/common.hpp"
#include "owd/geometry.hpp"
#include "owd/rng.hpp"

namespace owd {

// Annotation label for objects outside the known-class set.
inline constexpr int kUnknownLabel = -1;

// ---- pixel grids ----

// Channels-first RGB grid with values in [0,1].
struct Image {
    int channels = 0, height = 0, width = 0;
    std::vector<double> data;  // [c][y][x]

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w) {
        if (c < 1 || h < 1 || w < 1) throw shape_error("Image: dimensions must be >= 1");
        data.assign(static_cast<std::size_t>(c) * h * w, 0.0);
    }
    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

// ---- manifests ----

struct InstanceAnnotation {
    int image_id = 0;
    int label = kUnknownLabel;  // index into DatasetManifest::class_names
    OrientedBox box;            // theta = 0 for axis-aligned datasets
};

struct ImageRecord {
    int id = 0;
    std::string path;           // empty for synthetic images
    std::uint64_t seed = 0;     // render seed for synthetic images
    int width = 0, height = 0;
};

struct DatasetManifest {
    std::vector<std::string> class_names;
    std::vector<ImageRecord> images;
    std::vector<InstanceAnnotation> annotations;
    std::set<int> labeled_ids;
    std::set<int> unlabeled_ids;
    nlohmann::json metadata = nlohmann::json::object();

    bool has_image(int id) const {
        for (const auto& im : images)
            if (im.id == id) return true;
        return false;
    }
    const ImageRecord& image(int id) const {
        for (const auto& im : images)
            if (im.id == id) return im;
        throw data_error("manifest: unknown image id " + std::to_string(id));
    }
    std::vector<const InstanceAnnotation*> annotations_for(int image_id) const {
        std::vector<const InstanceAnnotation*> out;
        for (const auto& a : annotations)
            if (a.image_id == image_id) out.push_back(&a);
        return out;
    }
    int class_index(const std::string& name) const {
        for (std::size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == name) return static_cast<int>(i);
        return -1;
    }

    // labeled/unlabeled must partition the image set; annotations must point
    // at known images and known classes.
    void validate() const {
        std::set<int> ids;
        for (const auto& im : images) {
            if (!ids.insert(im.id).second)
                throw data_error("manifest: duplicate image id " + std::to_string(im.id));
        }
        for (int id : labeled_ids)
            if (unlabeled_ids.count(id))
                throw data_error("manifest: image " + std::to_string(id) +
                                 " is both labeled and unlabeled");
        std::set<int> partition = labeled_ids;
        partition.insert(unlabeled_ids.begin(), unlabeled_ids.end());
        if (partition != ids)
            throw data_error("manifest: labeled/unlabeled sets do not partition the image set");
        for (const auto& a : annotations) {
            if (!ids.count(a.image_id))
                throw data_error("manifest: annotation references missing image id " +
                                 std::to_string(a.image_id));
            if (a.label != kUnknownLabel &&
                (a.label < 0 || a.label >= static_cast<int>(class_names.size())))
                throw data_error("manifest: annotation label " + std::to_string(a.label) +
                                 " outside class table");
            if (!a.box.valid()) throw data_error("manifest: invalid box on image " +
                                                 std::to_string(a.image_id));
        }
    }
};

// ---- JSON persistence ----

namespace detail {

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        std::size_t line = 1;
        const std::size_t stop = std::min(e.byte, text.size());
        for (std::size_t i = 0; i < stop; ++i)
            if (text[i] == '\n') ++line;
        throw data_error(path + ":" + std::to_string(line) + ": " + e.what());
    }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw data_error("cannot write " + path);
    f << j.dump(2) << "\n";
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["class_names"] = m.class_names;
    j["images"] = nlohmann::json::array();
    for (const auto& im : m.images)
        j["images"].push_back({{"id", im.id},
                               {"path", im.path},
                               {"seed", im.seed},
                               {"width", im.width},
                               {"height", im.height}});
    j["annotations"] = nlohmann::json::array();
    for (const auto& a : m.annotations)
        j["annotations"].push_back({{"image_id", a.image_id},
                                    {"label", a.label},
                                    {"cx", a.box.cx},
                                    {"cy", a.box.cy},
                                    {"w", a.box.w},
                                    {"h", a.box.h},
                                    {"theta", a.box.theta}});
    j["labeled_ids"] = m.labeled_ids;
    j["unlabeled_ids"] = m.unlabeled_ids;
    j["metadata"] = m.metadata;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        for (const auto& im : j.at("images")) {
            ImageRecord r;
            r.id = im.at("id").get<int>();
            r.path = im.value("path", std::string());
            r.seed = im.value("seed", std::uint64_t{0});
            r.width = im.at("width").get<int>();
            r.height = im.at("height").get<int>();
            m.images.push_back(r);
        }
        for (const auto& a : j.at("annotations")) {
            InstanceAnnotation ann;
            ann.image_id = a.at("image_id").get<int>();
            ann.label = a.at("label").get<int>();
            ann.box = OrientedBox{a.at("cx").get<double>(), a.at("cy").get<double>(),
                                  a.at("w").get<double>(), a.at("h").get<double>(),
                                  a.value("theta", 0.0)};
            m.annotations.push_back(ann);
        }
        for (int id : j.at("labeled_ids")) m.labeled_ids.insert(id);
        for (int id : j.at("unlabeled_ids")) m.unlabeled_ids.insert(id);
        m.metadata = j.value("metadata", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("manifest JSON: ") + e.what());
    }
    m.validate();
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    detail::write_json_file(path, manifest_to_json(m));
}

inline DatasetManifest load_manifest(const std::string& path) {
    return manifest_from_json(detail::load_json_file(path));
}

// ---- incremental task schedule ----

struct TaskSchedule {
    struct Task {
        std::vector<std::string> classes;
        double fraction = 1.0;  // labeled-image proportion for this task
    };
    std::vector<Task> tasks;

    void validate() const {
        if (tasks.empty()) throw protocol_error("schedule: no tasks");
        std::set<std::string> seen;
        for (const auto& t : tasks) {
            if (t.classes.empty()) throw protocol_error("schedule: empty class group");
            if (!(t.fraction > 0.0 && t.fraction <= 1.0))
                throw protocol_error("schedule: fraction must lie in (0,1]");
            for (const auto& c : t.classes)
                if (!seen.insert(c).second)
                    throw protocol_error("schedule: class '" + c + "' appears in two groups");
        }
    }
    // Cumulative known classes after task t (1-based).
    std::vector<std::string> known_after(int t) const {
        std::vector<std::string> out;
        for (int i = 0; i < t && i < static_cast<int>(tasks.size()); ++i)
            out.insert(out.end(), tasks[i].classes.begin(), tasks[i].classes.end());
        return out;
    }
};

inline nlohmann::json schedule_to_json(const TaskSchedule& s) {
    nlohmann::json j;
    j["tasks"] = nlohmann::json::array();
    for (const auto& t : s.tasks)
        j["tasks"].push_back({{"classes", t.classes}, {"fraction", t.fraction}});
    return j;
}

inline TaskSchedule schedule_from_json(const nlohmann::json& j) {
    TaskSchedule s;
    try {
        for (const auto& t : j.at("tasks")) {
            TaskSchedule::Task task;
            task.classes = t.at("classes").get<std::vector<std::string>>();
            task.fraction = t.value("fraction", 1.0);
            s.tasks.push_back(task);
        }
    } catch (const nlohmann::json::exception& e) {
        throw protocol_error(std::string("schedule JSON: ") + e.what());
    }
    s.validate();
    return s;
}

inline TaskSchedule load_schedule(const std::string& path) {
    return schedule_from_json(detail::load_json_file(path));
}

// ---- COCO-style parsing ----

inline DatasetManifest parse_coco(const std::string& path) {
    const nlohmann::json j = detail::load_json_file(path);
    DatasetManifest m;
    try {
        // Categories become the class table in ascending external-id order.
        std::map<int, std::string> cats;
        for (const auto& c : j.at("categories"))
            cats[c.at("id").get<int>()] = c.at("name").get<std::string>();
        std::map<int, int> cat_to_label;
        for (const auto& [ext_id, name] : cats) {
            cat_to_label[ext_id] = static_cast<int>(m.class_names.size());
            m.class_names.push_back(name);
        }
        std::map<int, std::pair<int, int>> sizes;  // image id -> (w, h)
        for (const auto& im : j.at("images")) {
            ImageRecord r;
            r.id = im.at("id").get<int>();
            r.path = im.value("file_name", std::string());
            r.width = im.at("width").get<int>();
            r.height = im.at("height").get<int>();
            if (r.width < 1 || r.height < 1)
                throw data_error(path + ": image " + std::to_string(r.id) + " has empty size");
            sizes[r.id] = {r.width, r.height};
            m.images.push_back(r);
            m.labeled_ids.insert(r.id);
        }
        for (const auto& a : j.at("annotations")) {
            InstanceAnnotation ann;
            ann.image_id = a.at("image_id").get<int>();
            const auto size_it = sizes.find(ann.image_id);
            if (size_it == sizes.end())
                throw data_error(path + ": annotation references missing image id " +
                                 std::to_string(ann.image_id));
            const int cat = a.at("category_id").get<int>();
            const auto cat_it = cat_to_label.find(cat);
            if (cat_it == cat_to_label.end())
                throw data_error(path + ": annotation uses undeclared category id " +
                                 std::to_string(cat));
            ann.label = cat_it->second;
            const auto& bbox = a.at("bbox");
            if (!bbox.is_array() || bbox.size() != 4)
                throw data_error(path + ": bbox must be [x,y,w,h]");
            const double W = size_it->second.first, H = size_it->second.second;
            const double x = bbox[0].get<double>(), y = bbox[1].get<double>();
            const double w = bbox[2].get<double>(), h = bbox[3].get<double>();
            if (w <= 0 || h <= 0)
                throw data_error(path + ": degenerate bbox on image " +
                                 std::to_string(ann.image_id));
            ann.box = OrientedBox{(x + w / 2) / W, (y + h / 2) / H, w / W, h / H, 0.0};
            m.annotations.push_back(ann);
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error(path + ": " + e.what());
    }
    m.validate();
    return m;
}

// ---- DOTA-style parsing ----

// Directory of per-image text files, one instance per line:
//   x1 y1 x2 y2 x3 y3 x4 y4 class difficulty
// Pixel sizes come from an optional images.json sidecar {stem: {width,height}};
// files without an entry use the DOTA tile convention of 1024x1024.
inline DatasetManifest parse_dota(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw data_error(dir + " is not a directory");
    DatasetManifest m;
    nlohmann::json sizes = nlohmann::json::object();
    if (fs::exists(fs::path(dir) / "images.json"))
        sizes = detail::load_json_file((fs::path(dir) / "images.json").string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".txt") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::map<std::string, int> labels;
    struct RawInstance {
        int image_id;
        std::string cls;
        OrientedBox box;
    };
    std::vector<RawInstance> raw;
    int next_id = 0;
    for (const auto& file : files) {
        const std::string stem = file.stem().string();
        ImageRecord rec;
        rec.id = next_id++;
        rec.path = file.string();
        rec.width = 1024;
        rec.height = 1024;
        if (sizes.contains(stem)) {
            rec.width = sizes[stem].value("width", 1024);
            rec.height = sizes[stem].value("height", 1024);
        }
        std::ifstream f(file);
        if (!f) throw data_error("cannot open " + file.string());
        std::string line;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty()) continue;
            // Standard DOTA headers carry acquisition metadata, not instances.
            if (line.rfind("imagesource", 0) == 0 || line.rfind("gsd", 0) == 0) continue;
            std::istringstream ss(line);
            std::array<double, 8> c{};
            for (int i = 0; i < 8; ++i) {
                std::string tok;
                if (!(ss >> tok))
                    throw data_error(file.string() + ":" + std::to_string(line_no) +
                                     ": expected 8 corner coordinates");
                try {
                    std::size_t used = 0;
                    c[static_cast<std::size_t>(i)] = std::stod(tok, &used);
                    if (used != tok.size()) throw std::invalid_argument(tok);
                } catch (const std::exception&) {
                    throw data_error(file.string() + ":" + std::to_string(line_no) +
                                     ": non-numeric coordinate '" + tok + "'");
                }
            }
            std::string cls, difficulty;
            if (!(ss >> cls))
                throw data_error(file.string() + ":" + std::to_string(line_no) +
                                 ": missing class name");
            ss >> difficulty;  // present in the format; unused at desk scale
            const std::array<Vec2, 4> corners{
                Vec2{c[0] / rec.width, c[1] / rec.height}, Vec2{c[2] / rec.width, c[3] / rec.height},
                Vec2{c[4] / rec.width, c[5] / rec.height}, Vec2{c[6] / rec.width, c[7] / rec.height}};
            OrientedBox box;
            try {
                box = min_area_rect(corners);
            } catch (const data_error& e) {
                throw data_error(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
            }
            labels.emplace(cls, 0);
            raw.push_back({rec.id, cls, box});
        }
        m.images.push_back(rec);
        m.labeled_ids.insert(rec.id);
    }
    for (auto& [name, idx] : labels) {
        idx = static_cast<int>(m.class_names.size());
        m.class_names.push_back(name);
    }
    for (const auto& r : raw)
        m.annotations.push_back({r.image_id, labels.at(r.cls), r.box});
    m.validate();
    return m;
}

// ---- incremental task splitting ----

// Task t's manifest keeps the images containing at least one instance of the
// task's class group and exposes only that group's labels; everything else in
// those images stays unlabeled (future unknowns by construction).
inline std::vector<DatasetManifest> generate_task_splits(const DatasetManifest& manifest,
                                                         const TaskSchedule& schedule) {
    schedule.validate();
    manifest.validate();
    std::map<std::string, int> group_of;
    for (std::size_t t = 0; t < schedule.tasks.size(); ++t)
        for (const auto& c : schedule.tasks[t].classes) group_of[c] = static_cast<int>(t);
    for (const auto& a : manifest.annotations) {
        if (a.label == kUnknownLabel) continue;
        const std::string& name = manifest.class_names[static_cast<std::size_t>(a.label)];
        if (!group_of.count(name))
            throw protocol_error("schedule does not cover class '" + name + "'");
    }
    std::vector<DatasetManifest> out;
    for (std::size_t t = 0; t < schedule.tasks.size(); ++t) {
        DatasetManifest task;
        task.class_names = manifest.class_names;
        std::set<int> current_labels;
        for (const auto& c : schedule.tasks[t].classes) {
            const int idx = manifest.class_index(c);
            if (idx >= 0) current_labels.insert(idx);
        }
        std::set<int> keep_images;
        for (const auto& a : manifest.annotations)
            if (a.label != kUnknownLabel && current_labels.count(a.label))
                keep_images.insert(a.image_id);
        for (const auto& im : manifest.images)
            if (keep_images.count(im.id)) {
                task.images.push_back(im);
                task.labeled_ids.insert(im.id);
            }
        for (const auto& a : manifest.annotations)
            if (keep_images.count(a.image_id) && a.label != kUnknownLabel &&
                current_labels.count(a.label))
                task.annotations.push_back(a);
        task.metadata["task_index"] = t + 1;
        task.metadata["current_classes"] = schedule.tasks[t].classes;
        task.metadata["fraction"] = schedule.tasks[t].fraction;
        if (manifest.metadata.contains("synthetic"))
            task.metadata["synthetic"] = manifest.metadata["synthetic"];
        task.validate();
        out.push_back(std::move(task));
    }
    return out;
}

// ---- partial (semi-supervised) labeling ----

// Image-granular greedy split: labeled images are accumulated
// largest-deficit-first with overshoot-averse lexicographic scoring, then a
// reverse prune drops images whose removal keeps every class at its target.
inline DatasetManifest partial_label_split(const DatasetManifest& manifest, double fraction,
                                           std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw parameter_error("partial_label_split: fraction must lie in (0,1]");
    manifest.validate();
    DatasetManifest out = manifest;
    out.labeled_ids.clear();
    out.unlabeled_ids.clear();
    if (fraction == 1.0) {
        for (const auto& im : out.images) out.labeled_ids.insert(im.id);
        out.metadata["label_fraction"] = 1.0;
        return out;
    }
    const int C = static_cast<int>(manifest.class_names.size());
    std::map<int, std::vector<int>> per_image;  // image id -> class counts
    std::vector<double> total(static_cast<std::size_t>(C), 0.0);
    for (const auto& im : manifest.images) per_image[im.id].assign(static_cast<std::size_t>(C), 0);
    for (const auto& a : manifest.annotations) {
        if (a.label == kUnknownLabel) continue;
        per_image[a.image_id][static_cast<std::size_t>(a.label)] += 1;
        total[static_cast<std::size_t>(a.label)] += 1.0;
    }
    std::vector<double> need(static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) need[static_cast<std::size_t>(c)] = fraction * total[static_cast<std::size_t>(c)];

    std::vector<int> candidates;
    for (const auto& im : manifest.images) candidates.push_back(im.id);
    Rng rng(seed);
    for (std::size_t i = candidates.size(); i > 1; --i)
        std::swap(candidates[i - 1], candidates[rng.uniform_index(i)]);

    std::vector<double> have(static_cast<std::size_t>(C), 0.0);
    std::vector<int> selected;
    std::set<int> selected_set;
    auto deficits_remain = [&] {
        for (int c = 0; c < C; ++c)
            if (have[static_cast<std::size_t>(c)] + 1e-9 < need[static_cast<std::size_t>(c)]) return true;
        return false;
    };
    while (deficits_remain()) {
        int best = -1;
        double best_useful = 0.0, best_overshoot = 0.0;
        for (const int id : candidates) {
            if (selected_set.count(id)) continue;
            const auto& cnt = per_image.at(id);
            double useful = 0.0, overshoot = 0.0;
            for (int c = 0; c < C; ++c) {
                const double deficit =
                    std::max(0.0, need[static_cast<std::size_t>(c)] - have[static_cast<std::size_t>(c)]);
                const double n = cnt[static_cast<std::size_t>(c)];
                useful += std::min(n, std::ceil(deficit - 1e-9));
                overshoot += std::max(0.0, n - deficit);
            }
            if (useful <= 0.0) continue;
            // Overshoot dominates: among minimal-overshoot images pick the
            // most useful one; ids break remaining ties for determinism.
            const bool better = best < 0 || overshoot < best_overshoot - 1e-12 ||
                                (std::fabs(overshoot - best_overshoot) <= 1e-12 &&
                                 (useful > best_useful + 1e-12 ||
                                  (std::fabs(useful - best_useful) <= 1e-12 && id < best)));
            if (better) {
                best = id;
                best_useful = useful;
                best_overshoot = overshoot;
            }
        }
        if (best < 0) break;  // deficits unservable by any remaining image
        selected.push_back(best);
        selected_set.insert(best);
        const auto& cnt = per_image.at(best);
        for (int c = 0; c < C; ++c) have[static_cast<std::size_t>(c)] += cnt[static_cast<std::size_t>(c)];
    }
    // Reverse prune: drop any image whose instances are all surplus by now.
    for (auto it = selected.rbegin(); it != selected.rend(); ++it) {
        const auto& cnt = per_image.at(*it);
        bool removable = true;
        for (int c = 0; c < C && removable; ++c)
            if (have[static_cast<std::size_t>(c)] - cnt[static_cast<std::size_t>(c)] + 1e-9 <
                need[static_cast<std::size_t>(c)])
                removable = false;
        if (removable) {
            for (int c = 0; c < C; ++c) have[static_cast<std::size_t>(c)] -= cnt[static_cast<std::size_t>(c)];
            selected_set.erase(*it);
        }
    }
    for (const auto& im : out.images) {
        if (selected_set.count(im.id))
            out.labeled_ids.insert(im.id);
        else
            out.unlabeled_ids.insert(im.id);
    }
    nlohmann::json achieved = nlohmann::json::object();
    for (int c = 0; c < C; ++c)
        if (total[static_cast<std::size_t>(c)] > 0)
            achieved[manifest.class_names[static_cast<std::size_t>(c)]] =
                have[static_cast<std::size_t>(c)] / total[static_cast<std::size_t>(c)];
    out.metadata["label_fraction"] = fraction;
    out.metadata["achieved_proportions"] = achieved;
    return out;
}

// ---- pixel-only augmentations ----

struct AugmentationSpec {
    bool color_jitter = true;
    bool gaussian_blur = true;
    bool greyscale = true;
    bool posterize = false;  // degrades performance; off unless ablating
    bool solarize = false;   // degrades performance; off unless ablating
    double jitter_prob = 0.8, jitter_strength = 0.4;
    double blur_prob = 0.5, blur_sigma_max = 1.2;
    double grey_prob = 0.2;
    double posterize_prob = 0.3;
    int posterize_bits = 4;
    double solarize_prob = 0.3, solarize_threshold = 0.5;
    std::uint64_t seed = 0;
};

namespace detail {

inline void jitter_pixels(Image& img, double strength, Rng& rng) {
    for (int c = 0; c < img.channels; ++c) {
        const double scale = 1.0 + rng.uniform(-strength, strength);
        const double shift = rng.uniform(-strength, strength) * 0.5;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                img.at(c, y, x) = std::clamp(img.at(c, y, x) * scale + shift, 0.0, 1.0);
    }
}

inline void blur_pixels(Image& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= norm;
    auto reflect = [](int v, int n) {
        while (v < 0 || v >= n) v = v < 0 ? -v - 1 : 2 * n - v - 1;
        return v;
    };
    Image tmp = img;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           img.at(c, y, reflect(x + i, img.width));
                tmp.at(c, y, x) = acc;
            }
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           tmp.at(c, reflect(y + i, img.height), x);
                img.at(c, y, x) = acc;
            }
}

}  // namespace detail

// Applies the enabled pixel ops in a fixed order (jitter, blur, greyscale,
// posterize, solarize), each gated by its probability. Never touches
// geometry; output dimensions equal input dimensions.
inline Image augment(const Image& image, const AugmentationSpec& spec) {
    Image out = image;
    Rng rng(spec.seed);
    if (spec.color_jitter && rng.bernoulli(spec.jitter_prob))
        detail::jitter_pixels(out, spec.jitter_strength, rng);
    if (spec.gaussian_blur && rng.bernoulli(spec.blur_prob))
        detail::blur_pixels(out, rng.uniform(0.2, spec.blur_sigma_max));
    if (spec.greyscale && rng.bernoulli(spec.grey_prob)) {
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                double grey = 0.0;
                for (int c = 0; c < out.channels; ++c) grey += out.at(c, y, x);
                grey /= out.channels;
                for (int c = 0; c < out.channels; ++c) out.at(c, y, x) = grey;
            }
    }
    if (spec.posterize && rng.bernoulli(spec.posterize_prob)) {
        const double levels = static_cast<double>(1 << spec.posterize_bits);
        for (auto& v : out.data) v = std::floor(v * levels) / levels;
    }
    if (spec.solarize && rng.bernoulli(spec.solarize_prob)) {
        for (auto& v : out.data)
            if (v > spec.solarize_threshold) v = 1.0 - v;
    }
    return out;
}

// ---- synthetic shapes ----

// Desk-scale stand-in for COCO/DOTA: bright colored shapes on a dark noisy
// background, exact boxes by construction, deterministic per (config, seed).
struct SyntheticConfig {
    int num_classes = 4;  // circle, rectangle, triangle, ring, plus, diamond
    int num_images = 100;
    int min_instances = 1;
    int max_instances = 3;
    int image_size = 64;
    bool oriented = false;
    double min_extent = 0.28;  // normalized box sides; keeps coarse-scale pooling nonempty
    double max_extent = 0.45;
    std::uint64_t seed = 0;
};

namespace detail {

inline const char* synthetic_class_name(int c) {
    static const char* names[] = {"circle", "rectangle", "triangle", "ring", "plus", "diamond"};
    return names[c];
}

// Classes whose silhouette determines orientation modulo pi.
inline bool synthetic_class_rotatable(int c) { return c == 1 || c == 2; }

struct SyntheticInstance {
    int label = 0;
    OrientedBox box;
    std::array<double, 3> color{};
};

// One reproducible sampling routine shared by manifest generation and pixel
// rendering; both must see the identical instance stream for a given seed.
inline std::vector<SyntheticInstance> sample_synthetic_instances(const SyntheticConfig& cfg,
                                                                 Rng& rng) {
    static const double base_colors[6][3] = {{0.92, 0.20, 0.15}, {0.20, 0.86, 0.20},
                                             {0.25, 0.38, 0.95}, {0.95, 0.86, 0.20},
                                             {0.90, 0.25, 0.88}, {0.20, 0.85, 0.88}};
    const int n = rng.uniform_int(cfg.min_instances, cfg.max_instances);
    std::vector<SyntheticInstance> out;
    for (int i = 0; i < n; ++i) {
        SyntheticInstance inst;
        inst.label = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(cfg.num_classes)));
        for (int attempt = 0; attempt < 40; ++attempt) {
            double w = rng.uniform(cfg.min_extent, cfg.max_extent);
            double h = rng.uniform(cfg.min_extent, cfg.max_extent);
            if (inst.label == 0 || inst.label == 3) h = w;          // disks stay square
            if (inst.label == 1) h = std::clamp(w / 1.6, cfg.min_extent, cfg.max_extent);
            double theta = 0.0;
            if (cfg.oriented && synthetic_class_rotatable(inst.label))
                theta = rng.uniform(-kPi / 4.0, kPi / 4.0);
            // Keep the rotated silhouette inside the frame.
            const double half_span =
                0.5 * std::hypot(w, h);
            const double margin = cfg.oriented ? half_span : std::max(w, h) / 2;
            if (margin > 0.48) continue;
            const double cx = rng.uniform(margin + 0.02, 0.98 - margin);
            const double cy = rng.uniform(margin + 0.02, 0.98 - margin);
            inst.box = OrientedBox{cx, cy, w, h, theta};
            bool clash = false;
            for (const auto& prev : out)
                if (iou(inst.box.axis_aligned(), prev.box.axis_aligned()) > 0.15) clash = true;
            if (!clash) break;
        }
        if (!inst.box.valid()) continue;
        for (int c = 0; c < 3; ++c)
            inst.color[static_cast<std::size_t>(c)] =
                std::clamp(base_colors[inst.label][c] + rng.uniform(-0.08, 0.08), 0.0, 1.0);
        out.push_back(inst);
    }
    return out;
}

inline bool synthetic_point_inside(int label, double u, double v) {
    // (u, v) in the shape's local frame, each in [-1, 1].
    switch (label) {
        case 0: return u * u + v * v <= 1.0;
        case 1: return true;
        case 2: return std::fabs(u) <= (v + 1.0) / 2.0;
        case 3: {
            const double r = std::sqrt(u * u + v * v);
            return r <= 1.0 && r >= 0.55;
        }
        case 4: return std::fabs(u) <= 0.34 || std::fabs(v) <= 0.34;
        default: return std::fabs(u) + std::fabs(v) <= 1.0;
    }
}

}  // namespace detail

// Renders the image that manifest entry (cfg, seed) describes.
inline Image render_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const auto instances = detail::sample_synthetic_instances(cfg, rng);
    const int n = cfg.image_size;
    Image img(3, n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double noise = rng.uniform(0.02, 0.09);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = noise;
        }
    for (const auto& inst : instances) {
        const double ct = std::cos(inst.box.theta), st = std::sin(inst.box.theta);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double px = (x + 0.5) / n - inst.box.cx;
                const double py = (y + 0.5) / n - inst.box.cy;
                // Inverse-rotate into the shape frame.
                const double lx = px * ct + py * st;
                const double ly = -px * st + py * ct;
                const double u = lx / (inst.box.w / 2);
                const double v = ly / (inst.box.h / 2);
                if (std::fabs(u) <= 1.0 && std::fabs(v) <= 1.0 &&
                    detail::synthetic_point_inside(inst.label, u, v))
                    for (int c = 0; c < 3; ++c)
                        img.at(c, y, x) = inst.color[static_cast<std::size_t>(c)];
            }
    }
    return img;
}

inline DatasetManifest synthetic_shapes(const SyntheticConfig& cfg) {
    if (cfg.num_classes < 2 || cfg.num_classes > 6)
        throw parameter_error("synthetic_shapes: num_classes must lie in [2,6]");
    if (cfg.num_images < 1 || cfg.min_instances < 1 || cfg.max_instances < cfg.min_instances)
        throw parameter_error("synthetic_shapes: bad image/instance counts");
    if (cfg.image_size < 16) throw parameter_error("synthetic_shapes: image_size too small");
    DatasetManifest m;
    for (int c = 0; c < cfg.num_classes; ++c)
        m.class_names.push_back(detail::synthetic_class_name(c));
    Rng master(cfg.seed);
    for (int i = 0; i < cfg.num_images; ++i) {
        ImageRecord rec;
        rec.id = i;
        rec.seed = master.fork(static_cast<std::uint64_t>(i)).raw_seed();
        rec.width = cfg.image_size;
        rec.height = cfg.image_size;
        m.images.push_back(rec);
        m.labeled_ids.insert(i);
        Rng rng(rec.seed);
        for (const auto& inst : detail::sample_synthetic_instances(cfg, rng))
            m.annotations.push_back({i, inst.label, inst.box});
    }
    m.metadata["synthetic"] = {{"num_classes", cfg.num_classes},
                               {"num_images", cfg.num_images},
                               {"min_instances", cfg.min_instances},
                               {"max_instances", cfg.max_instances},
                               {"image_size", cfg.image_size},
                               {"oriented", cfg.oriented},
                               {"min_extent", cfg.min_extent},
                               {"max_extent", cfg.max_extent},
                               {"seed", cfg.seed}};
    m.validate();
    return m;
}

inline SyntheticConfig synthetic_config_from_manifest(const DatasetManifest& m) {
    if (!m.metadata.contains("synthetic"))
        throw data_error("manifest carries no synthetic-render configuration");
    const auto& j = m.metadata["synthetic"];
    SyntheticConfig cfg;
    cfg.num_classes = j.value("num_classes", 4);
    cfg.num_images = j.value("num_images", 0);
    cfg.min_instances = j.value("min_instances", 1);
    cfg.max_instances = j.value("max_instances", 3);
    cfg.image_size = j.value("image_size", 64);
    cfg.oriented = j.value("oriented", false);
    cfg.min_extent = j.value("min_extent", 0.28);
    cfg.max_extent = j.value("max_extent", 0.45);
    cfg.seed = j.value("seed", std::uint64_t{0});
    return cfg;
}

// Pixels for any manifest image: synthetic records render from their seed;
// path-only records (real datasets) have no desk-scale pixel source.
inline Image load_image(const DatasetManifest& m, int image_id) {
    const ImageRecord& rec = m.image(image_id);
    if (m.metadata.contains("synthetic")) {
        SyntheticConfig cfg = synthetic_config_from_manifest(m);
        return render_synthetic(cfg, rec.seed);
    }
    throw data_error("image " + std::to_string(image_id) +
                     " has no pixel source (non-synthetic manifest)");
}

}  // namespace owd
