#pragma once

// Synthetic detection scenes, COCO-style JSON import/export, the text
// tokenizer and the per-image poisoning planners for the three attacks.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trap/common.hpp"
#include "trap/geometry.hpp"
#include "trap/image_io.hpp"

namespace trap {

struct Annotation {
  BoxXYXY box;
  int class_id = 0;
};

struct SceneSample {
  ImageSample image;
  std::vector<Annotation> annotations;
};

struct Dataset {
  std::vector<SceneSample> scenes;
  std::vector<std::string> class_names;
  std::vector<std::string> synonyms;  // parallel to class_names
  int image_size = 64;

  int num_classes() const { return int(class_names.size()); }
};

struct GenConfig {
  int n_images = 200;
  int image_size = 64;
  int n_classes = 6;
  int min_objects = 1;
  int max_objects = 4;
  int min_size = 20;
  int max_size = 44;
  uint64_t seed = 0;
};

namespace detail {

struct ShapeSpec {
  const char* name;
  const char* synonym;
  double r, g, b;
};

inline const std::vector<ShapeSpec>& shape_specs() {
  static const std::vector<ShapeSpec> k = {
      {"circle", "disc", 0.95, 0.15, 0.15},   {"square", "block", 0.15, 0.85, 0.20},
      {"triangle", "wedge", 0.20, 0.30, 0.95}, {"cross", "plus", 0.95, 0.90, 0.15},
      {"ring", "hoop", 0.90, 0.20, 0.90},      {"diamond", "rhombus", 0.10, 0.85, 0.90}};
  return k;
}

// Point-in-shape test in box-relative coordinates u,v in [0,1].
inline bool in_shape(int cls, double u, double v) {
  double du = u - 0.5, dv = v - 0.5;
  switch (cls) {
    case 0: return du * du + dv * dv <= 0.25;                       // circle
    case 1: return true;                                            // square
    case 2: return std::abs(du) <= 0.5 * v;                         // triangle, apex up
    case 3: return std::abs(du) <= 0.18 || std::abs(dv) <= 0.18;    // cross
    case 4: {                                                       // ring
      double d = std::sqrt(du * du + dv * dv);
      return d >= 0.28 && d <= 0.5;
    }
    case 5: return std::abs(du) + std::abs(dv) <= 0.5;              // diamond
    default: throw config_error("in_shape: class out of range");
  }
}

}  // namespace detail

/// Deterministic synthetic scenes: textured background, 1..max_objects solid
/// shapes with per-class colors, stratified class sampling so the class
/// histogram stays near-uniform.
inline Dataset generate_synthetic(const GenConfig& cfg) {
  if (cfg.n_classes < 2 || cfg.n_classes > int(detail::shape_specs().size()))
    throw config_error("generate_synthetic: n_classes out of range");
  if (cfg.n_images < 1) throw config_error("generate_synthetic: n_images < 1");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
    throw config_error("generate_synthetic: bad object count range");
  if (cfg.min_size < 4 || cfg.max_size < cfg.min_size || cfg.max_size > cfg.image_size)
    throw config_error("generate_synthetic: bad size range");

  Dataset ds;
  ds.image_size = cfg.image_size;
  for (int c = 0; c < cfg.n_classes; ++c) {
    ds.class_names.push_back(detail::shape_specs()[size_t(c)].name);
    ds.synonyms.push_back(detail::shape_specs()[size_t(c)].synonym);
  }

  auto rng = make_rng(derive_seed(cfg.seed, "synthetic-data"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> nobj(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> osize(cfg.min_size, cfg.max_size);

  // Stratified class pool keeps per-class counts within a few of each other.
  std::vector<int> pool;
  auto draw_class = [&]() {
    if (pool.empty()) {
      for (int c = 0; c < cfg.n_classes; ++c) pool.push_back(c);
      std::shuffle(pool.begin(), pool.end(), rng);
    }
    int c = pool.back();
    pool.pop_back();
    return c;
  };

  const int S = cfg.image_size;
  for (int n = 0; n < cfg.n_images; ++n) {
    SceneSample scene;
    scene.image = ImageSample(S, S);

    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = 0.35 + 0.3 * unit(rng);
      gx[c] = (unit(rng) - 0.5) * 0.2;
      gy[c] = (unit(rng) - 0.5) * 0.2;
    }
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        for (int c = 0; c < 3; ++c)
          scene.image.at(y, x, c) =
              std::clamp(base[c] + gx[c] * x / S + gy[c] * y / S + (unit(rng) - 0.5) * 0.08,
                         0.0, 1.0);

    int objects = nobj(rng);
    for (int k = 0; k < objects; ++k) {
      int cls = draw_class();
      int size = osize(rng);
      int x0 = 0, y0 = 0;
      // Prefer placements that do not bury an existing object.
      for (int attempt = 0; attempt < 20; ++attempt) {
        x0 = int(unit(rng) * (S - size));
        y0 = int(unit(rng) * (S - size));
        BoxXYXY cand{double(x0), double(y0), double(x0 + size), double(y0 + size)};
        bool crowded = false;
        for (const auto& a : scene.annotations)
          if (iou(cand, a.box) > 0.3) crowded = true;
        if (!crowded) break;
      }

      const auto& spec = detail::shape_specs()[size_t(cls)];
      double jr = (unit(rng) - 0.5) * 0.12, jg = (unit(rng) - 0.5) * 0.12,
             jb = (unit(rng) - 0.5) * 0.12;
      for (int y = y0; y < y0 + size; ++y)
        for (int x = x0; x < x0 + size; ++x) {
          double u = (x - x0 + 0.5) / size, v = (y - y0 + 0.5) / size;
          if (!detail::in_shape(cls, u, v)) continue;
          scene.image.at(y, x, 0) = std::clamp(spec.r + jr, 0.0, 1.0);
          scene.image.at(y, x, 1) = std::clamp(spec.g + jg, 0.0, 1.0);
          scene.image.at(y, x, 2) = std::clamp(spec.b + jb, 0.0, 1.0);
        }
      scene.annotations.push_back(
          {{double(x0), double(y0), double(x0 + size), double(y0 + size)}, cls});
    }
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

// ---- COCO-style JSON ------------------------------------------------------------

/// Write `dir/annotations.json` plus one PNG per scene under `dir/images/`.
inline void export_coco(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");

  nlohmann::json root;
  root["images"] = nlohmann::json::array();
  root["annotations"] = nlohmann::json::array();
  root["categories"] = nlohmann::json::array();
  for (int c = 0; c < ds.num_classes(); ++c)
    root["categories"].push_back(
        {{"id", c + 1}, {"name", ds.class_names[size_t(c)]}, {"synonym", ds.synonyms[size_t(c)]}});

  int ann_id = 1;
  for (size_t i = 0; i < ds.scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.png", i);
    const SceneSample& s = ds.scenes[i];
    root["images"].push_back({{"id", int(i) + 1},
                              {"file_name", std::string("images/") + name},
                              {"width", s.image.width},
                              {"height", s.image.height}});
    for (const Annotation& a : s.annotations) {
      root["annotations"].push_back(
          {{"id", ann_id++},
           {"image_id", int(i) + 1},
           {"category_id", a.class_id + 1},
           {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
           {"area", a.box.area()},
           {"iscrowd", 0}});
    }
    write_png((fs::path(dir) / "images" / name).string(), s.image);
  }

  std::ofstream out(fs::path(dir) / "annotations.json");
  if (!out) throw io_error("export_coco: cannot write " + dir);
  out << root.dump(2) << "\n";
}

inline Dataset load_coco(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "annotations.json");
  if (!in) throw io_error("load_coco: missing annotations.json in " + dir);
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("load_coco: parse failure: " + std::string(e.what()));
  }

  Dataset ds;
  try {
    std::vector<std::pair<int, std::pair<std::string, std::string>>> cats;
    for (const auto& c : root.at("categories"))
      cats.push_back({c.at("id").get<int>(),
                      {c.at("name").get<std::string>(), c.value("synonym", c.at("name").get<std::string>())}});
    std::sort(cats.begin(), cats.end());
    for (size_t i = 0; i < cats.size(); ++i) {
      if (cats[i].first != int(i) + 1)
        throw io_error("load_coco: category ids must be contiguous from 1");
      ds.class_names.push_back(cats[i].second.first);
      ds.synonyms.push_back(cats[i].second.second);
    }

    std::vector<std::pair<int, size_t>> order;  // image id -> scene index
    for (const auto& im : root.at("images")) {
      SceneSample s;
      s.image = read_png((fs::path(dir) / im.at("file_name").get<std::string>()).string());
      if (s.image.width != im.at("width").get<int>() ||
          s.image.height != im.at("height").get<int>())
        throw io_error("load_coco: PNG size disagrees with metadata");
      order.push_back({im.at("id").get<int>(), ds.scenes.size()});
      ds.scenes.push_back(std::move(s));
    }
    std::sort(order.begin(), order.end());

    auto scene_of = [&](int image_id) -> SceneSample& {
      for (auto& [id, idx] : order)
        if (id == image_id) return ds.scenes[idx];
      throw io_error("load_coco: annotation references unknown image id");
    };
    for (const auto& a : root.at("annotations")) {
      const auto& bb = a.at("bbox");
      if (!bb.is_array() || bb.size() != 4) throw io_error("load_coco: bbox must be [x,y,w,h]");
      int cat = a.at("category_id").get<int>();
      if (cat < 1 || cat > ds.num_classes()) throw io_error("load_coco: bad category_id");
      Annotation ann;
      ann.box = {bb[0].get<double>(), bb[1].get<double>(),
                 bb[0].get<double>() + bb[2].get<double>(),
                 bb[1].get<double>() + bb[3].get<double>()};
      ann.class_id = cat - 1;
      if (!ann.box.valid()) throw io_error("load_coco: degenerate bbox");
      scene_of(a.at("image_id").get<int>()).annotations.push_back(ann);
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error("load_coco: malformed document: " + std::string(e.what()));
  }
  if (!ds.scenes.empty()) ds.image_size = ds.scenes[0].image.width;
  return ds;
}

// ---- text ------------------------------------------------------------------------

/// Lowercase and split on whitespace and '.'.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch)) || ch == '.') {
      if (!cur.empty()) out.push_back(std::exchange(cur, {}));
    } else {
      cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// ---- poisoning -------------------------------------------------------------------

enum class AttackKind { oma, oda, oga };

inline AttackKind parse_attack(const std::string& s) {
  if (s == "oma") return AttackKind::oma;
  if (s == "oda") return AttackKind::oda;
  if (s == "oga") return AttackKind::oga;
  throw config_error("unknown attack kind: " + s);
}

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::oma: return "oma";
    case AttackKind::oda: return "oda";
    case AttackKind::oga: return "oga";
  }
  return "?";
}

struct PoisonPlan {
  std::vector<Placement> placements;
  std::vector<Annotation> annotations;  // ground truth for the poisoned view
};

/// Side of the hallucinated box for OGA.
inline int oga_box_side(int image_h, int image_w) {
  return std::min(200, std::min(image_h, image_w) / 2);
}

/// Derive the poisoned view of one image: where triggers go and what the
/// ground truth becomes.
///   oma: stamp every non-target object, relabel it to the target class
///   oda: stamp every target object, drop its annotation
///   oga: stamp one random location, add a hallucinated target box around it
/// Only oga consumes randomness.
inline PoisonPlan plan_poison(const std::vector<Annotation>& clean, AttackKind kind,
                              int target_class, double rho, int image_h, int image_w,
                              std::mt19937_64& rng) {
  if (target_class < 0) throw config_error("plan_poison: target class must be >= 0");
  PoisonPlan plan;
  switch (kind) {
    case AttackKind::oma:
      for (const Annotation& a : clean) {
        if (a.class_id == target_class) {
          plan.annotations.push_back(a);
        } else {
          plan.placements.push_back(plan_placement(a.box, rho, image_h, image_w));
          plan.annotations.push_back({a.box, target_class});
        }
      }
      break;
    case AttackKind::oda:
      for (const Annotation& a : clean) {
        if (a.class_id == target_class)
          plan.placements.push_back(plan_placement(a.box, rho, image_h, image_w));
        else
          plan.annotations.push_back(a);
      }
      break;
    case AttackKind::oga: {
      int side = oga_box_side(image_h, image_w);
      std::uniform_int_distribution<int> dx(0, image_w - side), dy(0, image_h - side);
      int x0 = dx(rng), y0 = dy(rng);
      BoxXYXY hbox{double(x0), double(y0), double(x0 + side), double(y0 + side)};
      plan.placements.push_back(plan_placement(hbox, rho, image_h, image_w));
      plan.annotations = clean;
      plan.annotations.push_back({hbox, target_class});
      break;
    }
  }
  return plan;
}

}  // namespace trap
