#include "fewshot/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fewshot/error.hpp"
#include "fewshot/io.hpp"

namespace fewshot {

namespace {

constexpr std::array<std::uint8_t, 4> kDatasetMagic{'S', 'S', 'L', 'D'};
constexpr std::uint16_t kDatasetVersion = 1;
constexpr std::size_t kReservedBytes = 17;

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h -= std::floor(h);
  const double sector = h * 6.0;
  const int i = static_cast<int>(std::floor(sector)) % 6;
  const double f = sector - std::floor(sector);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

enum class ShapeKind { circle, square, triangle };

// Point (dx, dy) relative to the shape centre; r is the half extent.
bool inside(ShapeKind kind, double dx, double dy, double r) {
  if (r <= 0) return false;
  switch (kind) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::max(std::abs(dx), std::abs(dy)) <= r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
  }
  return false;
}

}  // namespace

Image Image::blank(std::size_t c, std::size_t h, std::size_t w, float fill) {
  return Image{c, h, w, std::vector<float>(c * h * w, fill)};
}

void Dataset::validate() const {
  if (images.size() != labels.size()) throw Error(Errc::invalid_argument, "dataset: image/label count mismatch");
  if (!origin.empty() && origin.size() != images.size()) {
    throw Error(Errc::invalid_argument, "dataset: origin count mismatch");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw Error(Errc::label_out_of_range, "dataset: label " + std::to_string(labels[i]) + " out of range");
    }
    const auto& img = images[i];
    if (img.channels != images[0].channels || img.height != images[0].height || img.width != images[0].width ||
        img.pixels.size() != img.channels * img.height * img.width) {
      throw Error(Errc::shape_mismatch, "dataset: images differ in shape");
    }
    for (float p : img.pixels) {
      if (!(p >= 0.0f && p <= 1.0f)) throw Error(Errc::invalid_argument, "dataset: pixel outside [0,1]");
    }
  }
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

UnlabeledImages strip_labels(const Dataset& dataset) {
  return UnlabeledImages{dataset.images};
}

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices) {
  Dataset out;
  out.class_names = dataset.class_names;
  out.source_id = dataset.source_id;
  out.num_classes = dataset.num_classes;
  for (auto i : indices) {
    out.images.push_back(dataset.images.at(i));
    out.labels.push_back(dataset.labels.at(i));
    out.origin.push_back(dataset.origin.empty() ? i : dataset.origin[i]);
  }
  return out;
}

// --- file format ------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  d.validate();
  if (d.images.empty()) throw Error(Errc::invalid_argument, "cannot save an empty dataset");
  const auto& first = d.images[0];
  if (first.channels > 255 || first.height > 65535 || first.width > 65535 || d.num_classes > 65535) {
    throw Error(Errc::invalid_argument, "dataset extents exceed the file format limits");
  }
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.images.size()));
  w.u16(static_cast<std::uint16_t>(d.num_classes));
  w.u8(static_cast<std::uint8_t>(first.channels));
  w.u16(static_cast<std::uint16_t>(first.height));
  w.u16(static_cast<std::uint16_t>(first.width));
  w.zeros(kReservedBytes);
  for (const auto& img : d.images) {
    for (float p : img.pixels) w.u8(static_cast<std::uint8_t>(std::lround(static_cast<double>(p) * 255.0)));
  }
  for (int l : d.labels) w.u16(static_cast<std::uint16_t>(l));
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string& source_id) {
  io::ByteReader r(bytes, Errc::truncated);
  if (bytes.size() < 4 || !std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), bytes.begin())) {
    throw Error(Errc::bad_magic, "not an SSLD dataset: " + source_id);
  }
  r.bytes(4);
  const auto version = r.u16();
  if (version != kDatasetVersion) {
    throw Error(Errc::bad_version, "unsupported dataset version " + std::to_string(version));
  }
  const auto n = r.u32();
  const auto num_classes = r.u16();
  const std::size_t c = r.u8(), h = r.u16(), w = r.u16();
  r.bytes(kReservedBytes);
  const std::size_t per_image = c * h * w;
  const std::size_t expected = per_image * n + 2ull * n;
  if (r.remaining() < expected) {
    throw Error(Errc::truncated, "dataset truncated: header promises " + std::to_string(n) + " images");
  }
  if (r.remaining() > expected) throw Error(Errc::truncated, "dataset has trailing bytes after the label table");

  Dataset d;
  d.source_id = source_id;
  d.num_classes = num_classes;
  d.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto raw = r.bytes(per_image);
    Image img{c, h, w, std::vector<float>(per_image)};
    for (std::size_t k = 0; k < per_image; ++k) img.pixels[k] = static_cast<float>(raw[k]) / 255.0f;
    d.images.push_back(std::move(img));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = r.u16();
    if (l >= num_classes) {
      throw Error(Errc::label_out_of_range, "label " + std::to_string(l) + " >= num_classes " +
                                                 std::to_string(num_classes) + " at image " + std::to_string(i));
    }
    d.labels.push_back(l);
  }
  d.origin.resize(n);
  std::iota(d.origin.begin(), d.origin.end(), std::size_t{0});
  for (int k = 0; k < d.num_classes; ++k) d.class_names.push_back("class" + std::to_string(k));
  return d;
}

Dataset load_dataset(const std::string& path) {
  auto d = decode_dataset(io::read_file(path), path);
  std::ifstream names(path + ".names");
  if (names) {
    std::vector<std::string> list;
    for (std::string line; std::getline(names, line);) {
      if (!line.empty()) list.push_back(line);
    }
    if (list.size() == static_cast<std::size_t>(d.num_classes)) d.class_names = std::move(list);
  }
  return d;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  io::write_file_atomic(path, encode_dataset(dataset));
  if (!dataset.class_names.empty()) {
    std::string text;
    for (const auto& n : dataset.class_names) text += n + "\n";
    io::write_text_atomic(path + ".names", text);
  }
}

// --- synthetic data ---------------------------------------------------------

Dataset generate_synthetic_dataset(int num_classes, int per_class, int image_size, std::uint64_t seed) {
  if (num_classes < 2) throw Error(Errc::invalid_argument, "synthetic dataset needs at least 2 classes");
  if (per_class < 2) throw Error(Errc::invalid_argument, "synthetic dataset needs at least 2 images per class");
  if (image_size < 8) throw Error(Errc::invalid_argument, "synthetic images must be at least 8 pixels");

  constexpr int kSuper = 4;  // supersampling per axis
  constexpr double kHueStep = 0.1;
  constexpr double kHueJitter = 0.07;
  const auto size = static_cast<std::size_t>(image_size);

  Dataset d;
  d.num_classes = num_classes;
  d.source_id = "synthetic:" + std::to_string(num_classes) + "x" + std::to_string(per_class) + "@" +
                std::to_string(image_size) + "#" + std::to_string(seed);
  static const char* kShapeNames[] = {"circle", "square", "triangle"};
  for (int k = 0; k < num_classes; ++k) {
    const bool hollow = (k / 3) % 2 == 1;
    std::ostringstream name;
    name << (hollow ? "hollow-" : "filled-") << kShapeNames[k % 3] << "-hue" << k;
    d.class_names.push_back(name.str());
  }

  for (int k = 0; k < num_classes; ++k) {
    const auto kind = static_cast<ShapeKind>(k % 3);
    const bool hollow = (k / 3) % 2 == 1;
    const double base_hue = std::fmod(k * kHueStep + (k / 10) * 0.05, 1.0);
    for (int i = 0; i < per_class; ++i) {
      auto rng = Rng::stream(seed, "synthetic", static_cast<std::uint64_t>(k) * per_class + i);
      const double hue = base_hue + rng.uniform(-kHueJitter, kHueJitter);
      const double sat = rng.uniform(0.6, 1.0);
      const double val = rng.uniform(0.6, 1.0);
      const double background = rng.uniform(0.0, 0.5);
      const double scale = rng.uniform(0.5, 0.9);
      const double r = scale * image_size / 2.0;
      const double cx = rng.uniform(r, image_size - r);
      const double cy = rng.uniform(r, image_size - r);
      const double stroke = std::max(1.5, 0.15 * 2.0 * r);
      const auto rgb = hsv_to_rgb(hue, sat, val);

      Image img = Image::blank(3, size, size);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSuper; ++sy) {
            for (int sx = 0; sx < kSuper; ++sx) {
              const double px = x + (sx + 0.5) / kSuper - cx;
              const double py = y + (sy + 0.5) / kSuper - cy;
              bool on = inside(kind, px, py, r);
              if (on && hollow) {
                const double inner = kind == ShapeKind::triangle ? r - 2.0 * stroke : r - stroke;
                on = !inside(kind, px, py - (kind == ShapeKind::triangle ? stroke * 0.5 : 0.0), inner);
              }
              hits += on ? 1 : 0;
            }
          }
          const double cover = static_cast<double>(hits) / (kSuper * kSuper);
          for (std::size_t ch = 0; ch < 3; ++ch) {
            const double v = background * (1.0 - cover) + rgb[ch] * cover + 0.02 * rng.normal();
            img.at(ch, y, x) = quantize(v);
          }
        }
      }
      d.images.push_back(std::move(img));
      d.labels.push_back(k);
    }
  }
  d.origin.resize(d.images.size());
  std::iota(d.origin.begin(), d.origin.end(), std::size_t{0});
  return d;
}

// --- augmentation -----------------------------------------------------------

void AugConfig::validate() const {
  if (out_size < 1) throw Error(Errc::invalid_argument, "augmentation: out_size must be positive");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw Error(Errc::invalid_argument, "augmentation: crop scale range must lie in (0, 1]");
  }
  if (!(flip_p >= 0.0 && flip_p <= 1.0)) throw Error(Errc::invalid_argument, "augmentation: flip p outside [0,1]");
  if (!(brightness >= 0.0 && brightness < 1.0) || !(contrast >= 0.0 && contrast < 1.0)) {
    throw Error(Errc::invalid_argument, "augmentation: brightness/contrast outside [0,1)");
  }
}

AugConfig AugConfig::disabled(int out_size) {
  AugConfig a;
  a.out_size = out_size;
  a.crop = false;
  a.flip_p = 0.0;
  a.brightness = 0.0;
  a.contrast = 0.0;
  return a;
}

Image crop_and_resize(const Image& image, const CropWindow& win, std::size_t out_size) {
  if (win.height == 0 || win.width == 0 || win.top + win.height > image.height ||
      win.left + win.width > image.width) {
    throw Error(Errc::invalid_argument, "crop window outside the image");
  }
  if (out_size == 0) throw Error(Errc::invalid_argument, "crop output size must be positive");
  Image out = Image::blank(image.channels, out_size, out_size);
  auto coord = [out_size](std::size_t o, std::size_t n) {
    if (out_size == 1) return (static_cast<double>(n) - 1.0) / 2.0;
    return static_cast<double>(o) * static_cast<double>(n - 1) / static_cast<double>(out_size - 1);
  };
  for (std::size_t oy = 0; oy < out_size; ++oy) {
    const double sy = coord(oy, win.height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const auto y1 = std::min(y0 + 1, win.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_size; ++ox) {
      const double sx = coord(ox, win.width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const auto x1 = std::min(x0 + 1, win.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double a = image.at(c, win.top + y0, win.left + x0);
        const double b = image.at(c, win.top + y0, win.left + x1);
        const double p = image.at(c, win.top + y1, win.left + x0);
        const double q = image.at(c, win.top + y1, win.left + x1);
        const double top = fx == 0.0 ? a : a + (b - a) * fx;
        const double bottom = fx == 0.0 ? p : p + (q - p) * fx;
        out.at(c, oy, ox) = static_cast<float>(fy == 0.0 ? top : top + (bottom - top) * fy);
      }
    }
  }
  return out;
}

CropWindow sample_crop_window(std::size_t height, std::size_t width, double scale_min, double scale_max, Rng& rng) {
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw Error(Errc::invalid_argument, "crop scale range must lie in (0, 1]");
  }
  const double area = rng.uniform(scale_min, scale_max);
  const double side = std::sqrt(area);
  CropWindow w;
  w.height = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * height)), 1, height);
  w.width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * width)), 1, width);
  w.top = static_cast<std::size_t>(rng.below(height - w.height + 1));
  w.left = static_cast<std::size_t>(rng.below(width - w.width + 1));
  return w;
}

Image random_crop(const Image& image, std::size_t out_size, double scale_min, double scale_max, Rng& rng) {
  if (out_size > image.height || out_size > image.width) {
    throw Error(Errc::invalid_argument, "crop output larger than the image");
  }
  return crop_and_resize(image, sample_crop_window(image.height, image.width, scale_min, scale_max, rng), out_size);
}

Image horizontal_flip(const Image& image, double p, Rng& rng) {
  if (!rng.bernoulli(p)) return image;
  Image out = image;
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t y = 0; y < image.height; ++y) {
      for (std::size_t x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
    }
  }
  return out;
}

Image color_jitter(const Image& image, double brightness, double contrast, Rng& rng) {
  if (!(brightness >= 0.0 && brightness < 1.0) || !(contrast >= 0.0 && contrast < 1.0)) {
    throw Error(Errc::invalid_argument, "color_jitter: brightness/contrast outside [0,1)");
  }
  const double b = rng.uniform(1.0 - brightness, 1.0 + brightness);
  const double c = rng.uniform(1.0 - contrast, 1.0 + contrast);
  double total = 0.0;
  for (float p : image.pixels) total += b * p;
  const double m = image.pixels.empty() ? 0.0 : total / static_cast<double>(image.pixels.size());
  Image out = image;
  for (auto& p : out.pixels) p = static_cast<float>(std::clamp(c * (b * p - m) + m, 0.0, 1.0));
  return out;
}

Rng view_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  return Rng::stream(seed, "views/epoch" + std::to_string(epoch), index);
}

ViewPair make_views(const Image& image, const AugConfig& config, const Rng& rng, std::size_t origin_index) {
  config.validate();
  const auto out = static_cast<std::size_t>(config.out_size);
  auto one_view = [&](Rng r) {
    const CropWindow win = config.crop
                               ? sample_crop_window(image.height, image.width, config.scale_min, config.scale_max, r)
                               : CropWindow{0, 0, image.height, image.width};
    Image v = crop_and_resize(image, win, out);
    v = horizontal_flip(v, config.flip_p, r);
    return color_jitter(v, config.brightness, config.contrast, r);
  };
  return ViewPair{one_view(rng.fork(0)), one_view(rng.fork(1)), origin_index};
}

// --- splits -----------------------------------------------------------------

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& d) {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(d.num_classes));
  for (std::size_t i = 0; i < d.size(); ++i) out.at(static_cast<std::size_t>(d.labels[i])).push_back(i);
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> split_few_shot(const Dataset& dataset, const SplitSpec& spec) {
  if (spec.per_class_train < 1 || spec.per_class_test < 1) {
    throw Error(Errc::invalid_argument, "split counts must be positive");
  }
  auto groups = indices_by_class(dataset);
  std::vector<std::size_t> train, test;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    auto& g = groups[k];
    const auto need = static_cast<std::size_t>(spec.per_class_train + spec.per_class_test);
    if (g.size() < need) {
      throw Error(Errc::invalid_argument, "class " + std::to_string(k) + " has " + std::to_string(g.size()) +
                                              " images, split needs " + std::to_string(need));
    }
    auto rng = Rng::stream(spec.seed, "split", k);
    rng.shuffle(g);
    train.insert(train.end(), g.begin(), g.begin() + spec.per_class_train);
    test.insert(test.end(), g.begin() + spec.per_class_train, g.begin() + static_cast<std::ptrdiff_t>(need));
  }
  return {subset(dataset, train), subset(dataset, test)};
}

std::pair<Dataset, Dataset> split_validation(const Dataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(Errc::invalid_argument, "validation fraction outside (0,1)");
  auto groups = indices_by_class(dataset);
  std::vector<std::size_t> keep, held;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    auto& g = groups[k];
    if (g.empty()) continue;
    if (g.size() < 2) throw Error(Errc::invalid_argument, "validation split needs two images of every class");
    auto rng = Rng::stream(seed, "validation", k);
    rng.shuffle(g);
    auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(g.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, g.size() - 1);
    held.insert(held.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n_val));
    keep.insert(keep.end(), g.begin() + static_cast<std::ptrdiff_t>(n_val), g.end());
  }
  return {subset(dataset, keep), subset(dataset, held)};
}

std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
  if (batch_size < 1) throw Error(Errc::invalid_argument, "batch size must be at least 1");
  std::vector<std::size_t> perm(count);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto rng = Rng::stream(seed, "batches", epoch);
  rng.shuffle(perm);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  }
  return out;
}

std::vector<float> pack_images(std::span<const Image* const> images) {
  std::vector<float> out;
  if (images.empty()) return out;
  out.reserve(images.size() * images[0]->pixels.size());
  for (const Image* img : images) {
    if (img->pixels.size() != images[0]->pixels.size()) throw Error(Errc::shape_mismatch, "images differ in shape");
    out.insert(out.end(), img->pixels.begin(), img->pixels.end());
  }
  return out;
}

}  // namespace fewshot
