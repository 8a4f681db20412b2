#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsfpn/annotations.hpp"
#include "dsfpn/box.hpp"

namespace dsfpn {

inline const std::vector<std::string> kShapeNames{"rectangle", "disc", "triangle"};

struct Dataset {
  std::vector<std::string> categories;  // index = 0-based category id
  std::vector<int> category_ids;        // COCO id of each category; 1..K when empty
  std::vector<Sample> samples;

  int coco_category_id(int category) const {
    return category_ids.empty() ? category + 1 : category_ids.at(static_cast<std::size_t>(category));
  }
  int category_index(int coco_id) const {
    if (category_ids.empty()) {
      if (coco_id < 1 || coco_id > int(categories.size())) {
        throw std::runtime_error("unknown category_id " + std::to_string(coco_id));
      }
      return coco_id - 1;
    }
    auto it = std::find(category_ids.begin(), category_ids.end(), coco_id);
    if (it == category_ids.end()) throw std::runtime_error("unknown category_id " + std::to_string(coco_id));
    return static_cast<int>(it - category_ids.begin());
  }
};

struct SynthConfig {
  std::size_t min_shapes = 1, max_shapes = 4;
  double min_side = 10, max_side = 28;
  double noise = 0.35;  // background pixels uniform in [0, noise]
};

namespace detail {

inline float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

inline Mask rasterize_shape(int category, const Box& frame, std::size_t h, std::size_t w) {
  Mask m(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      if (px < frame.x1 || px > frame.x2 || py < frame.y1 || py > frame.y2) continue;
      bool inside = false;
      if (category == 0) {
        inside = true;
      } else if (category == 1) {
        const double r = 0.5 * std::min(frame.width(), frame.height());
        inside = std::hypot(px - frame.cx(), py - frame.cy()) <= r;
      } else {
        // Apex at the top center, base along the bottom edge.
        const double t = (py - frame.y1) / frame.height();
        inside = std::abs(px - frame.cx()) <= 0.5 * frame.width() * t;
      }
      m.at(y, x) = inside ? 1 : 0;
    }
  }
  return m;
}

}  // namespace detail

// Noise background with 1–4 disjoint shapes; the class is the shape kind. Pixel values are multiples of 1/255
// so images survive a PPM round trip unchanged.
inline Dataset synth_generate(std::size_t n, std::size_t image_size, std::size_t num_classes, std::uint64_t seed,
                              const SynthConfig& cfg = {}) {
  if (n == 0) throw std::invalid_argument("synth_generate: n must be positive");
  if (num_classes == 0 || num_classes > kShapeNames.size()) {
    throw std::invalid_argument("synth_generate: num_classes must be 1, 2 or 3");
  }
  if (double(image_size) < cfg.max_side + 2) throw std::invalid_argument("synth_generate: image too small for shapes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Dataset ds;
  ds.categories.assign(kShapeNames.begin(), kShapeNames.begin() + static_cast<long>(num_classes));
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.image_id = static_cast<int>(i + 1);
    std::ostringstream name;
    name << "img_" << std::setw(5) << std::setfill('0') << i << ".ppm";
    s.file_name = name.str();
    s.image = Image(image_size, image_size);
    for (auto& v : s.image.data) v = detail::quantize(cfg.noise * unit(rng));
    const std::size_t want = cfg.min_shapes + std::uniform_int_distribution<std::size_t>(0, cfg.max_shapes - cfg.min_shapes)(rng);
    std::vector<Box> frames;
    for (int attempt = 0; attempt < 200 && s.instances.size() < want; ++attempt) {
      const double fw = cfg.min_side + (cfg.max_side - cfg.min_side) * unit(rng);
      const double fh = cfg.min_side + (cfg.max_side - cfg.min_side) * unit(rng);
      const double x = std::floor(unit(rng) * (double(image_size) - fw));
      const double y = std::floor(unit(rng) * (double(image_size) - fh));
      const Box frame{x, y, std::round(x + fw), std::round(y + fh)};
      const Box padded{frame.x1 - 2, frame.y1 - 2, frame.x2 + 2, frame.y2 + 2};
      if (std::any_of(frames.begin(), frames.end(), [&](const Box& f) { return iou(f, padded) > 0; })) continue;
      const int category = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, num_classes - 1)(rng));
      Mask mask = detail::rasterize_shape(category, frame, image_size, image_size);
      if (mask.count() == 0) continue;
      frames.push_back(frame);
      const double color[3] = {0.55 + 0.45 * unit(rng), 0.55 + 0.45 * unit(rng), 0.55 + 0.45 * unit(rng)};
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < mask.data.size(); ++p) {
          if (mask.data[p]) s.image.data[c * image_size * image_size + p] = detail::quantize(color[c]);
        }
      }
      s.instances.push_back({mask_bounds(mask), category, std::move(mask)});
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---- PPM / PGM ----

inline void write_ppm(const Image& im, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << "P6\n" << im.width << ' ' << im.height << "\n255\n";
  std::vector<unsigned char> buf(3 * im.width * im.height);
  for (std::size_t y = 0; y < im.height; ++y) {
    for (std::size_t x = 0; x < im.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        buf[(y * im.width + x) * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(im.at(c, y, x), 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

inline void write_pgm(const std::vector<std::uint8_t>& pixels, std::size_t h, std::size_t w, const std::string& path) {
  if (pixels.size() != h * w) throw std::invalid_argument("write_pgm: pixel count does not match size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

namespace detail {
inline std::size_t pnm_token(std::istream& is) {
  std::string tok;
  while (is >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(is, rest);
      continue;
    }
    return std::stoul(tok);
  }
  throw std::runtime_error("truncated PNM header");
}
}  // namespace detail

// Reads P6 (color) or P5 (gray, replicated to three channels) 8-bit images.
inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::string magic;
  is >> magic;
  if (magic != "P6" && magic != "P5") throw std::runtime_error("'" + path + "' is not a binary PPM/PGM file");
  const std::size_t w = detail::pnm_token(is), h = detail::pnm_token(is), maxval = detail::pnm_token(is);
  if (maxval != 255) throw std::runtime_error("'" + path + "': only 8-bit images are supported");
  is.get();
  const std::size_t ch = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(ch * w * h);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw std::runtime_error("'" + path + "': truncated pixel data");
  }
  Image im(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = float(buf[(y * w + x) * ch + (ch == 3 ? c : 0)]) / 255.0f;
    }
  }
  return im;
}

// ---- COCO ----

// [x1,y1,x2,y2] <-> [x,y,w,h]
inline std::vector<double> to_xywh(const Box& b) { return {b.x1, b.y1, b.width(), b.height()}; }
inline Box from_xywh(const std::vector<double>& v) {
  if (v.size() != 4) throw std::invalid_argument("bbox must have four numbers");
  return {v[0], v[1], v[0] + v[2], v[1] + v[3]};
}

// Uncompressed COCO RLE: column-major run lengths, starting with a run of zeros.
inline std::vector<std::uint32_t> rle_encode(const Mask& m) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::size_t x = 0; x < m.width; ++x) {
    for (std::size_t y = 0; y < m.height; ++y) {
      const std::uint8_t v = m.at(y, x) ? 1 : 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  }
  counts.push_back(run);
  return counts;
}

inline Mask rle_decode(const std::vector<std::uint32_t>& counts, std::size_t h, std::size_t w) {
  Mask m(h, w);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (auto c : counts) {
    if (pos + c > h * w) throw std::runtime_error("RLE counts exceed the mask size");
    for (std::size_t i = 0; i < c; ++i, ++pos) m.at(pos % h, pos / h) = v;
    v ^= 1;
  }
  if (pos != h * w) throw std::runtime_error("RLE counts do not cover the mask");
  return m;
}

// Even-odd fill of the polygon(s), sampled at pixel centers.
inline Mask rasterize_polygons(const std::vector<std::vector<double>>& polys, std::size_t h, std::size_t w) {
  Mask m(h, w);
  for (const auto& poly : polys) {
    if (poly.size() < 6 || poly.size() % 2) throw std::runtime_error("polygon needs at least three x,y pairs");
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      bool inside = false;
      for (const auto& poly : polys) {
        const std::size_t n = poly.size() / 2;
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
          const double xi = poly[2 * i], yi = poly[2 * i + 1], xj = poly[2 * j], yj = poly[2 * j + 1];
          if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
        }
      }
      m.at(y, x) = inside ? 1 : 0;
    }
  }
  return m;
}

inline nlohmann::json coco_json(const Dataset& ds) {
  using nlohmann::json;
  json images = json::array(), annotations = json::array(), categories = json::array();
  for (std::size_t c = 0; c < ds.categories.size(); ++c) {
    categories.push_back({{"id", ds.coco_category_id(static_cast<int>(c))}, {"name", ds.categories[c]}});
  }
  int ann_id = 1;
  for (const auto& s : ds.samples) {
    images.push_back({{"id", s.image_id}, {"file_name", s.file_name}, {"width", s.image.width}, {"height", s.image.height}});
    for (const auto& inst : s.instances) {
      json ann{{"id", ann_id++},
               {"image_id", s.image_id},
               {"category_id", ds.coco_category_id(inst.category)},
               {"bbox", to_xywh(inst.box)},
               {"area", inst.mask.data.empty() ? inst.box.area() : double(inst.mask.count())},
               {"iscrowd", 0}};
      if (!inst.mask.data.empty()) {
        ann["segmentation"] = {{"size", {inst.mask.height, inst.mask.width}}, {"counts", rle_encode(inst.mask)}};
      }
      annotations.push_back(std::move(ann));
    }
  }
  return {{"images", images}, {"annotations", annotations}, {"categories", categories}};
}

// Writes <dir>/<json_name> plus one PPM per image.
inline void coco_write(const Dataset& ds, const std::string& dir, const std::string& json_name = "annotations.json",
                       bool with_images = true) {
  std::filesystem::create_directories(dir);
  if (with_images) {
    for (const auto& s : ds.samples) write_ppm(s.image, (std::filesystem::path(dir) / s.file_name).string());
  }
  const auto path = (std::filesystem::path(dir) / json_name).string();
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << coco_json(ds).dump(1) << '\n';
}

// Parses a COCO document. Images are loaded from `image_dir` when it is non-empty; otherwise each sample
// gets a blank image of the declared size.
inline Dataset coco_parse(const nlohmann::json& doc, const std::string& image_dir) {
  using nlohmann::json;
  try {
    Dataset ds;
    for (const auto& c : doc.at("categories")) {
      ds.category_ids.push_back(c.at("id").get<int>());
      ds.categories.push_back(c.value("name", "class" + std::to_string(ds.category_ids.back())));
    }
    std::vector<int> image_ids;
    for (const auto& im : doc.at("images")) {
      Sample s;
      s.image_id = im.at("id").get<int>();
      s.file_name = im.at("file_name").get<std::string>();
      const auto w = im.at("width").get<std::size_t>(), h = im.at("height").get<std::size_t>();
      if (image_dir.empty()) {
        s.image = Image(h, w);
      } else {
        s.image = read_pnm((std::filesystem::path(image_dir) / s.file_name).string());
        if (s.image.width != w || s.image.height != h) {
          throw std::runtime_error("image '" + s.file_name + "' does not match its declared size");
        }
      }
      image_ids.push_back(s.image_id);
      ds.samples.push_back(std::move(s));
    }
    for (const auto& a : doc.at("annotations")) {
      const int image_id = a.at("image_id").get<int>();
      auto it = std::find(image_ids.begin(), image_ids.end(), image_id);
      if (it == image_ids.end()) throw std::runtime_error("annotation refers to unknown image_id " + std::to_string(image_id));
      Sample& s = ds.samples[static_cast<std::size_t>(it - image_ids.begin())];
      Instance inst;
      inst.category = ds.category_index(a.at("category_id").get<int>());
      inst.box = from_xywh(a.at("bbox").get<std::vector<double>>());
      if (a.contains("segmentation")) {
        const auto& seg = a["segmentation"];
        if (seg.is_object()) {
          const auto size = seg.at("size").get<std::vector<std::size_t>>();
          if (size.size() != 2) throw std::runtime_error("RLE size must be [height, width]");
          if (!seg.at("counts").is_array()) throw std::runtime_error("only uncompressed RLE counts are supported");
          inst.mask = rle_decode(seg["counts"].get<std::vector<std::uint32_t>>(), size[0], size[1]);
        } else {
          inst.mask = rasterize_polygons(seg.get<std::vector<std::vector<double>>>(), s.image.height, s.image.width);
        }
      }
      s.instances.push_back(std::move(inst));
    }
    return ds;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed COCO annotations: ") + e.what());
  }
}

inline Dataset coco_read(const std::string& json_path, bool load_images = true) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("cannot open '" + json_path + "'");
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed JSON in '" + json_path + "': " + e.what());
  }
  const auto dir = std::filesystem::path(json_path).parent_path().string();
  return coco_parse(doc, load_images ? (dir.empty() ? "." : dir) : "");
}

// Samples with at least one instance; training needs ground truth in every image.
inline std::vector<const Sample*> annotated(const Dataset& ds) {
  std::vector<const Sample*> out;
  for (const auto& s : ds.samples) {
    if (!s.instances.empty()) out.push_back(&s);
  }
  return out;
}

}  // namespace dsfpn
