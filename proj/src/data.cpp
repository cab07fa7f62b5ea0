#include "hierpath/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "hierpath/error.hpp"
#include "hierpath/random.hpp"

namespace hierpath {

namespace fs = std::filesystem;

namespace {

using Rgb = std::array<double, 3>;

constexpr std::size_t kShapes = 6;
constexpr std::size_t kTextures = 6;
constexpr std::size_t kMarkers = 8;

const Rgb kShapeColor{0.08, 0.08, 0.08};
const Rgb kTextureFg{0.95, 0.95, 0.95};
const Rgb kTextureBg{0.45, 0.45, 0.45};
const Rgb kMarkerColors[2] = {{0.9, 0.1, 0.1}, {0.1, 0.3, 0.95}};

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{};
  switch (static_cast<int>(hp)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (auto& ch : rgb) ch += m;
  return rgb;
}

std::size_t sibling_index(const ClassTree& tree, NodeId node) {
  const auto& sibs = tree.children(*tree.parent(node));
  return static_cast<std::size_t>(std::find(sibs.begin(), sibs.end(), node) - sibs.begin());
}

class Canvas {
 public:
  explicit Canvas(std::size_t size) : size_(size), image_(Shape{3, size, size}) {}

  std::size_t size() const { return size_; }

  void set(long y, long x, const Rgb& c) {
    if (y < 0 || x < 0 || y >= static_cast<long>(size_) || x >= static_cast<long>(size_)) return;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      image_[(ch * size_ + static_cast<std::size_t>(y)) * size_ + static_cast<std::size_t>(x)] = c[ch];
    }
  }

  Tensor& image() { return image_; }

 private:
  std::size_t size_;
  Tensor image_;
};

bool in_shape(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1: return dx * dx + dy * dy <= r * r;
    case 2: return std::abs(dx) + std::abs(dy) <= r;
    case 3: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
    case 4:
      return (std::abs(dx) <= r / 2.5 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r / 2.5 && std::abs(dx) <= r);
    default: return std::abs(std::abs(dx) - std::abs(dy)) <= r / 3.0 && std::abs(dx) <= r;
  }
}

bool texture_on(std::size_t texture, std::size_t u, std::size_t v, std::size_t p) {
  switch (texture) {
    case 0: return (v / p) % 2 == 0;
    case 1: return (u / p) % 2 == 0;
    case 2: return ((u / p) + (v / p)) % 2 == 0;
    case 3: return ((u + v) / (2 * p)) % 2 == 0;
    case 4: return (u / p) % 3 == 0 && (v / p) % 3 == 0;
    default: return true;
  }
}

/// Draws levels 2..4 of `path` centred at (cy, cx) with the given scale.
void draw_detail(Canvas& canvas, const ClassTree& tree, const LabelPath& path, double cy,
                 double cx, double scale) {
  const long n = static_cast<long>(canvas.size());
  if (path.size() >= 2) {
    const std::size_t shape = sibling_index(tree, path[1]);
    const double r = 11.0 * scale;
    for (long y = 0; y < n; ++y) {
      for (long x = 0; x < n; ++x) {
        if (in_shape(shape, x + 0.5 - cx, y + 0.5 - cy, r)) canvas.set(y, x, kShapeColor);
      }
    }
  }
  if (path.size() >= 3) {
    const std::size_t texture = sibling_index(tree, path[2]);
    const auto half = static_cast<long>(std::lround(5.0 * scale));
    const long top = static_cast<long>(std::lround(cy)) - half;
    const long left = static_cast<long>(std::lround(cx)) - half;
    const std::size_t period = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale)));
    for (long v = 0; v < 2 * half; ++v) {
      for (long u = 0; u < 2 * half; ++u) {
        const bool on = texture_on(texture, static_cast<std::size_t>(u),
                                   static_cast<std::size_t>(v), period);
        canvas.set(top + v, left + u, on ? kTextureFg : kTextureBg);
      }
    }
    if (path.size() >= 4) {
      const std::size_t marker = sibling_index(tree, path[3]);
      const long m = std::max<long>(2, std::lround(3.0 * scale));
      const std::size_t corner = marker % 4;
      const long my = corner < 2 ? top : top + 2 * half - m;
      const long mx = corner % 2 == 0 ? left : left + 2 * half - m;
      for (long y = 0; y < m; ++y) {
        for (long x = 0; x < m; ++x) canvas.set(my + y, mx + x, kMarkerColors[marker / 4]);
      }
    }
  }
}

}  // namespace

std::size_t factor_capacity(std::size_t level) {
  switch (level) {
    case 2: return kShapes;
    case 3: return kTextures;
    case 4: return kMarkers;
    default: return level == 1 ? static_cast<std::size_t>(-1) : 0;
  }
}

void check_renderable(const ClassTree& tree) {
  if (tree.max_depth() > 4) {
    throw ConfigError("tree depth " + std::to_string(tree.max_depth()) +
                      " exceeds the four visual factor levels");
  }
  for (NodeId v = 0; v < tree.node_count(); ++v) {
    const std::size_t level = tree.depth(v) + 1;
    if (tree.children(v).size() > factor_capacity(level)) {
      throw ConfigError("node '" + tree.name(v) + "' has " +
                        std::to_string(tree.children(v).size()) + " children; level " +
                        std::to_string(level) + " renders at most " +
                        std::to_string(factor_capacity(level)) + " distinct values");
    }
  }
}

Tensor render_sample(const ClassTree& tree, const std::vector<LabelPath>& paths,
                     const SyntheticRecipe& recipe, std::uint64_t sample_seed,
                     const std::vector<std::size_t>& slots) {
  if (paths.empty()) throw UsageError("render_sample needs at least one path");
  for (const auto& p : paths) {
    if (!tree.is_valid_path(p)) throw UsageError("invalid path '" + tree.path_string(p) + "'");
    if (p.front() != paths.front().front()) {
      throw UsageError("paths of one image must share their level-1 class");
    }
  }
  const std::size_t S = recipe.image_size;
  if (S < 8) throw ConfigError("image size must be at least 8");
  Canvas canvas(S);
  const auto& top = tree.children(0);
  const std::size_t hue_index = sibling_index(tree, paths.front().front());
  const Rgb bg = hsv(static_cast<double>(hue_index) / static_cast<double>(top.size()), 0.65, 0.85);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) canvas.set(static_cast<long>(y), static_cast<long>(x), bg);
  }

  std::mt19937_64 rng(mix_seed(sample_seed, 0x6a177e));
  const double scale = static_cast<double>(S) / 32.0;
  const bool multi = paths.size() > 1 || !slots.empty();
  if (multi && slots.size() != paths.size()) {
    throw UsageError("multi-path rendering needs one slot per path");
  }
  for (std::size_t k = 0; k < paths.size(); ++k) {
    const double local = multi ? scale / 2.0 : scale;
    const auto j = static_cast<long>(std::lround(static_cast<double>(recipe.jitter) * local));
    std::uniform_int_distribution<long> jitter(-j, j);
    const long jy = jitter(rng);
    const long jx = jitter(rng);
    double cy = S / 2.0, cx = S / 2.0;
    if (multi) {
      const std::size_t slot = slots[k];
      if (slot > 3) throw UsageError("slot index must be 0..3");
      cy = (slot / 2) * (S / 2.0) + S / 4.0;
      cx = (slot % 2) * (S / 2.0) + S / 4.0;
    }
    draw_detail(canvas, tree, paths[k], cy + static_cast<double>(jy), cx + static_cast<double>(jx),
                local);
  }

  Tensor& img = canvas.image();
  std::normal_distribution<double> noise(0.0, recipe.sigma > 0 ? recipe.sigma : 1.0);
  for (auto& v : img.values()) {
    if (recipe.sigma > 0) v += noise(rng);
    v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }
  return img;
}

std::vector<Sample> generate_samples(const ClassTree& tree, const SyntheticRecipe& recipe) {
  check_renderable(tree);
  const auto leaves = tree.leaves();
  std::vector<Sample> out;
  std::size_t index = 0;
  for (NodeId leaf : leaves) {
    for (std::size_t k = 0; k < recipe.per_leaf; ++k, ++index) {
      const std::uint64_t seed = mix_seed(recipe.seed, index);
      Sample s;
      char id[32];
      std::snprintf(id, sizeof id, "s%06zu", index);
      s.id = id;
      s.paths.push_back(tree.path_to(leaf));
      std::vector<std::size_t> slots;
      if (recipe.multilabel) {
        std::mt19937_64 rng(mix_seed(seed, 0x5e1ec7));
        std::vector<NodeId> pool;
        for (NodeId other : leaves) {
          if (other != leaf && tree.path_to(other).front() == s.paths.front().front()) {
            pool.push_back(other);
          }
        }
        const std::size_t want = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t i = 0; i + 1 < want && i < pool.size(); ++i) {
          s.paths.push_back(tree.path_to(pool[i]));
        }
        slots = {0, 1, 2, 3};
        std::shuffle(slots.begin(), slots.end(), rng);
        slots.resize(s.paths.size());
      }
      s.image = render_sample(tree, s.paths, recipe, seed, slots);
      std::sort(s.paths.begin(), s.paths.end());
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::array<std::vector<Sample>, 3> split_samples(std::vector<Sample> samples,
                                                  const SplitFractions& fractions,
                                                  std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (!(total > 0) || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0) {
    throw UsageError("split fractions must be non-negative with a positive sum");
  }
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, 0x5b117));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(samples.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * fractions[0] / total));
  const auto n_val = std::min(samples.size() - n_train,
                              static_cast<std::size_t>(std::llround(n * fractions[1] / total)));
  std::array<std::vector<Sample>, 3> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t bucket = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
    out[bucket].push_back(std::move(samples[order[i]]));
  }
  for (auto& split : out) {
    std::sort(split.begin(), split.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  }
  return out;
}

SplitSizes generate_dataset(const ClassTree& tree, const SyntheticRecipe& recipe,
                            const SplitFractions& fractions, const std::string& out_dir) {
  auto splits = split_samples(generate_samples(tree, recipe), fractions, recipe.seed);
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw LoadError("cannot create " + out_dir + ": " + ec.message());
  {
    std::ofstream out(fs::path(out_dir) / "tree.txt");
    out << tree.serialize();
    if (!out) throw LoadError("cannot write tree.txt in " + out_dir);
  }
  const char* names[3] = {"train", "val", "test"};
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<ManifestRecord> records;
    for (const auto& s : splits[k]) {
      const std::string rel = "images/" + s.id + ".png";
      write_png((fs::path(out_dir) / rel).string(), s.image);
      records.push_back({s.id, rel, s.paths});
    }
    write_manifest((fs::path(out_dir) / (std::string(names[k]) + ".tsv")).string(), records, tree);
  }
  return {splits[0].size(), splits[1].size(), splits[2].size()};
}

void write_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw DimensionError("write_png expects 3×H×W, got " + shape_string(image.shape()));
  }
  const std::size_t H = image.extent(1), W = image.extent(2);
  std::vector<png_byte> bytes(H * W * 3);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * H + y) * W + x], 0.0, 1.0);
        bytes[(y * W + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw LoadError("cannot write PNG " + path + ": " + img.message);
  }
}

Tensor read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw LoadError("cannot read PNG " + path + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    throw LoadError("cannot decode PNG " + path + ": " + img.message);
  }
  const std::size_t H = img.height, W = img.width;
  Tensor out(Shape{3, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * H + y) * W + x] = bytes[(y * W + x) * 3 + c] / 255.0;
      }
    }
  }
  return out;
}

std::vector<ManifestRecord> read_manifest(const std::string& path, const ClassTree& tree) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read manifest " + path);
  std::vector<ManifestRecord> out;
  std::vector<std::string> problems;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3) {
      problems.push_back("line " + std::to_string(number) + ": expected 3 tab-separated fields");
      continue;
    }
    ManifestRecord r{fields[0], fields[1], {}};
    std::stringstream ps(fields[2]);
    std::string p;
    while (std::getline(ps, p, '|')) {
      try {
        r.paths.push_back(tree.parse_path(p));
      } catch (const Error& e) {
        problems.push_back("line " + std::to_string(number) + ": " + e.what());
      }
    }
    if (r.paths.empty()) problems.push_back("line " + std::to_string(number) + ": no label path");
    out.push_back(std::move(r));
  }
  std::vector<std::string> ids;
  for (const auto& r : out) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] == ids[i - 1]) problems.push_back("duplicate sample id " + ids[i]);
  }
  if (!problems.empty()) {
    std::string msg = "manifest " + path + " has " + std::to_string(problems.size()) + " problem(s):";
    for (std::size_t i = 0; i < problems.size() && i < 10; ++i) msg += "\n  " + problems[i];
    throw LoadError(msg);
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records,
                    const ClassTree& tree) {
  std::ofstream out(path);
  for (const auto& r : records) {
    out << r.id << '\t' << r.image << '\t';
    for (std::size_t k = 0; k < r.paths.size(); ++k) {
      if (k) out << '|';
      out << tree.path_string(r.paths[k]);
    }
    out << '\n';
  }
  if (!out) throw LoadError("cannot write manifest " + path);
}

Tensor resize_shorter(const Tensor& image, std::size_t shorter) {
  const std::size_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
  const double s = static_cast<double>(shorter) / static_cast<double>(std::min(H, W));
  const auto oh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(H * s)));
  const auto ow = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(W * s)));
  Tensor out(Shape{C, oh, ow});
  for (std::size_t y = 0; y < oh; ++y) {
    const double sy = std::clamp((y + 0.5) * H / static_cast<double>(oh) - 0.5, 0.0, H - 1.0);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < ow; ++x) {
      const double sx = std::clamp((x + 0.5) * W / static_cast<double>(ow) - 0.5, 0.0, W - 1.0);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const auto at = [&](std::size_t yy, std::size_t xx) { return image[(c * H + yy) * W + xx]; };
        const double top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx;
        const double bottom = at(y1, x0) * (1 - fx) + at(y1, x1) * fx;
        out[(c * oh + y) * ow + x] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
  if (top + size > H || left + size > W) {
    throw DimensionError("crop " + std::to_string(size) + " at (" + std::to_string(top) + ", " +
                         std::to_string(left) + ") exceeds image " + shape_string(image.shape()));
  }
  Tensor out(Shape{C, size, size});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        out[(c * size + y) * size + x] = image[(c * H + top + y) * W + left + x];
      }
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& image) {
  const std::size_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        out[(c * H + y) * W + x] = image[(c * H + y) * W + (W - 1 - x)];
      }
    }
  }
  return out;
}

Tensor preprocess(const Tensor& image, const LoadOptions& o, std::uint64_t sample_seed) {
  Tensor out = image;
  std::mt19937_64 rng(mix_seed(o.seed, sample_seed));
  if (o.resize_min > 0) {
    std::size_t shorter = o.resize_min;
    if (o.train && o.resize_max > o.resize_min) {
      shorter = std::uniform_int_distribution<std::size_t>(o.resize_min, o.resize_max)(rng);
    }
    out = resize_shorter(out, shorter);
  }
  if (o.crop > 0) {
    const std::size_t H = out.extent(1), W = out.extent(2);
    if (o.crop > H || o.crop > W) {
      throw DimensionError("crop " + std::to_string(o.crop) + " larger than image " +
                           shape_string(out.shape()));
    }
    std::size_t top = (H - o.crop) / 2, left = (W - o.crop) / 2;
    if (o.train) {
      top = std::uniform_int_distribution<std::size_t>(0, H - o.crop)(rng);
      left = std::uniform_int_distribution<std::size_t>(0, W - o.crop)(rng);
    }
    out = crop(out, top, left, o.crop);
  }
  if (o.train && o.flip && std::bernoulli_distribution(0.5)(rng)) out = flip_horizontal(out);
  return out;
}

Dataset load_split(const std::string& dir, const std::string& split, const LoadOptions& options) {
  const fs::path root(dir);
  if (!fs::exists(root / "tree.txt")) throw LoadError("dataset " + dir + " has no tree.txt");
  Dataset ds{ClassTree::load((root / "tree.txt").string()), {}};
  const fs::path manifest = root / (split + ".tsv");
  if (!fs::exists(manifest)) return ds;
  const auto records = read_manifest(manifest.string(), ds.tree);
  std::vector<std::string> missing;
  for (const auto& r : records) {
    if (!fs::exists(root / r.image)) missing.push_back(r.image);
  }
  if (!missing.empty()) {
    std::string msg = "dataset " + dir + " is missing " + std::to_string(missing.size()) + " image(s):";
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) msg += " " + missing[i];
    throw LoadError(msg);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    Tensor image = read_png((root / records[i].image).string());
    ds.samples.push_back({records[i].id, preprocess(image, options, fnv1a(records[i].id)),
                          records[i].paths});
  }
  return ds;
}

}  // namespace hierpath
