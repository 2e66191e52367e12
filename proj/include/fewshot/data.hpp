#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fewshot/rng.hpp"

namespace fewshot {

/// C x H x W image, row-major, pixel values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  static Image blank(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f);
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string source_id;
  int num_classes = 0;
  /// Position of each image in the dataset it was originally loaded or
  /// generated as; identifies images across splits.
  std::vector<std::size_t> origin;

  std::size_t size() const { return images.size(); }
  /// Checks label/image counts, label range, pixel range and uniform shape.
  void validate() const;
  std::vector<std::size_t> class_counts() const;
};

/// Pretraining input. Carries no labels, so label blindness is a type
/// property of everything that consumes it.
struct UnlabeledImages {
  std::vector<Image> images;
  std::size_t size() const { return images.size(); }
};

UnlabeledImages strip_labels(const Dataset& dataset);
Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices);

// --- on-disk format ---------------------------------------------------------

/// Flat little-endian "SSLD" v1 file; class names go to `<path>.names`.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& dataset, const std::string& path);
std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string& source_id);

/// Procedural shape families (circle/square/triangle, filled or hollow) times
/// a base hue; adjacent hues overlap under jitter so colour alone is not
/// enough to separate classes.
Dataset generate_synthetic_dataset(int num_classes, int per_class, int image_size, std::uint64_t seed);

// --- augmentation -----------------------------------------------------------

struct CropWindow {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct AugConfig {
  int out_size = 32;
  bool crop = true;
  double scale_min = 0.6;
  double scale_max = 1.0;
  double flip_p = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;

  void validate() const;
  /// Every augmentation switched off (views are the resized original).
  static AugConfig disabled(int out_size);
};

/// Bilinear resize of `window` to out_size x out_size with corner-aligned
/// sampling: output index o maps to source coordinate o * (n - 1) / (out - 1).
Image crop_and_resize(const Image& image, const CropWindow& window, std::size_t out_size);
/// Area fraction drawn from [scale_min, scale_max]; aspect ratio kept; position uniform.
CropWindow sample_crop_window(std::size_t height, std::size_t width, double scale_min, double scale_max, Rng& rng);
Image random_crop(const Image& image, std::size_t out_size, double scale_min, double scale_max, Rng& rng);
Image horizontal_flip(const Image& image, double p, Rng& rng);
/// out = clamp(c * (b*img - mean(b*img)) + mean(b*img), 0, 1) with
/// b ~ U[1-brightness, 1+brightness], c ~ U[1-contrast, 1+contrast].
Image color_jitter(const Image& image, double brightness, double contrast, Rng& rng);

struct ViewPair {
  Image view1;
  Image view2;
  std::size_t origin_index = 0;
};

/// Two independent crop -> flip -> jitter draws from sub-streams of `rng`.
ViewPair make_views(const Image& image, const AugConfig& config, const Rng& rng, std::size_t origin_index);

/// Stream for the views of image `index` in `epoch`.
Rng view_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

// --- splits and batching ----------------------------------------------------

struct SplitSpec {
  int per_class_train = 100;
  int per_class_test = 50;
  std::uint64_t seed = 0;
};

/// Seeded per-class shuffle; first per_class_train to train, next
/// per_class_test to test; the rest is dropped.
std::pair<Dataset, Dataset> split_few_shot(const Dataset& dataset, const SplitSpec& spec);

/// Stratified holdout: round(fraction * count) images of each class (at least
/// one, leaving at least one) go to the second dataset.
std::pair<Dataset, Dataset> split_validation(const Dataset& dataset, double fraction, std::uint64_t seed);

/// Seeded permutation for (seed, epoch) chunked into batches; the short final
/// batch is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch);

/// Packs images into a contiguous N x C x H x W float buffer.
std::vector<float> pack_images(std::span<const Image* const> images);

}  // namespace fewshot
