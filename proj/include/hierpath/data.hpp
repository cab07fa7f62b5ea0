#pragma once

// Synthetic hierarchical images and the on-disk dataset format:
//   <dir>/tree.txt, <dir>/{train,val,test}.tsv, <dir>/images/<id>.png
// with manifest lines `sample_id<TAB>image_path<TAB>path1|path2`.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hierpath/class_tree.hpp"
#include "hierpath/tensor.hpp"

namespace hierpath {

struct SyntheticRecipe {
  std::size_t image_size = 32;
  double sigma = 0.05;
  std::uint64_t seed = 0;
  std::size_t per_leaf = 10;
  bool multilabel = false;
  std::size_t jitter = 1;  // pixels at 32×32, scaled with image size
};

/// Most siblings a level can hold before two of them would share a visual
/// factor value. Level 1 uses background hue and has no fixed cap.
std::size_t factor_capacity(std::size_t level);

/// Throws ConfigError when the tree is deeper than four levels or a level has
/// more siblings than its factor offers.
void check_renderable(const ClassTree& tree);

/// 3×S×S image in [0,1] for one sample. Multi-path samples draw each path's
/// detail in its own quadrant slot at half scale; `slots` gives those slots.
Tensor render_sample(const ClassTree& tree, const std::vector<LabelPath>& paths,
                     const SyntheticRecipe& recipe, std::uint64_t sample_seed,
                     const std::vector<std::size_t>& slots = {});

struct Sample {
  std::string id;
  Tensor image;
  std::vector<LabelPath> paths;
};

/// Every sample in generation order (leaf-major), deterministic from the seed.
std::vector<Sample> generate_samples(const ClassTree& tree, const SyntheticRecipe& recipe);

/// Fractions for train/val/test; normalized by their sum.
using SplitFractions = std::array<double, 3>;

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

/// Seeded shuffle then contiguous split; sizes rounded, test takes the rest.
std::array<std::vector<Sample>, 3> split_samples(std::vector<Sample> samples,
                                                  const SplitFractions& fractions,
                                                  std::uint64_t seed);

/// Writes images, manifests and tree.txt. Returns the split sizes.
SplitSizes generate_dataset(const ClassTree& tree, const SyntheticRecipe& recipe,
                            const SplitFractions& fractions, const std::string& out_dir);

void write_png(const std::string& path, const Tensor& image);
Tensor read_png(const std::string& path);

struct ManifestRecord {
  std::string id;
  std::string image;  // relative to the dataset directory
  std::vector<LabelPath> paths;
};

std::vector<ManifestRecord> read_manifest(const std::string& path, const ClassTree& tree);
void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records,
                    const ClassTree& tree);

struct LoadOptions {
  bool train = false;
  std::size_t resize_min = 0;  // shorter side; 0 skips resizing
  std::size_t resize_max = 0;
  std::size_t crop = 0;        // 0 skips cropping
  bool flip = false;
  std::uint64_t seed = 0;
};

/// Bilinear resize so the shorter side equals `shorter`.
Tensor resize_shorter(const Tensor& image, std::size_t shorter);
Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t size);
Tensor flip_horizontal(const Tensor& image);

/// Applies resize/crop/flip; train mode draws them from `sample_seed`.
Tensor preprocess(const Tensor& image, const LoadOptions& options, std::uint64_t sample_seed);

struct Dataset {
  ClassTree tree;
  std::vector<Sample> samples;
};

/// Loads one split ("train", "val" or "test"). An absent split file yields no
/// samples; missing images or invalid paths raise LoadError listing them.
Dataset load_split(const std::string& dir, const std::string& split,
                   const LoadOptions& options = {});

}  // namespace hierpath
