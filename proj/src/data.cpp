#include "cf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cf/error.hpp"

namespace cf {
namespace {

constexpr std::size_t kCifarRecord = 3073;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("tensor file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[pos++]} << (8 * i);
  return v;
}

// HSV (h in [0,1)) to RGB, all in [0,1].
void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Draws one synthetic image into `out` (3 channel planes of h*w). A
// negative class paints no pattern at all: background, distractors and
// lighting only, the kind of frame no classifier can explain.
void draw_synth_image(double* out, int klass, std::size_t h, std::size_t w,
                      double brightness_shift, std::size_t position_shift,
                      Rng& rng) {
  const int kind = klass >= 0 ? klass % 4 : -1;
  const int level = klass / 4;
  const std::size_t period = 4u << level;   // stripe/checker scale
  const double radius = 4.0 + 4.0 * level;  // disc scale

  double color[3];
  hsv_to_rgb(rng.uniform(), rng.uniform(0.25, 1.0), rng.uniform(0.6, 1.0), color);
  const double bg = rng.uniform(0.08, 0.25);
  const double contrast = rng.uniform(0.45, 1.0);
  const std::size_t phase_y = rng.uniform_int(period) + position_shift;
  const std::size_t phase_x = rng.uniform_int(period) + position_shift;
  const double cy = rng.uniform(10.0, static_cast<double>(h) - 10.0) +
                    static_cast<double>(position_shift);
  const double cx = rng.uniform(10.0, static_cast<double>(w) - 10.0) +
                    static_cast<double>(position_shift);

  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      bool on = false;
      switch (kind) {
        case -1: break;
        case 0: on = ((y + phase_y) / (period / 2)) % 2 == 0; break;
        case 1: on = ((x + phase_x) / (period / 2)) % 2 == 0; break;
        case 2:
          on = (((y + phase_y) / (period / 2)) +
                ((x + phase_x) / (period / 2))) % 2 == 0;
          break;
        default: {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          on = dy * dy + dx * dx <= radius * radius;
          break;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        out[c * plane + y * w + x] = on ? bg + contrast * (color[c] - bg) : bg;
      }
    }
  }

  // Solid distractor rectangles in random gray.
  for (int d = 0; d < 3; ++d) {
    const std::size_t dh = 3 + rng.uniform_int(8);
    const std::size_t dw = 3 + rng.uniform_int(8);
    const std::size_t y0 = rng.uniform_int(h - dh);
    const std::size_t x0 = rng.uniform_int(w - dw);
    const double gray = rng.uniform(0.0, 1.0);
    for (std::size_t y = y0; y < y0 + dh; ++y) {
      for (std::size_t x = x0; x < x0 + dw; ++x) {
        for (std::size_t c = 0; c < 3; ++c) out[c * plane + y * w + x] = gray;
      }
    }
  }

  const double lighting = rng.uniform(-0.10, 0.10) + brightness_shift;
  for (std::size_t i = 0; i < 3 * plane; ++i) {
    out[i] = clamp01(out[i] + lighting + 0.11 * rng.normal());
  }
}

}  // namespace

LabeledDataset load_cifar10(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  LabeledDataset out;
  out.class_count = 10;
  out.labels.reserve(n);
  out.images = zeros({n, 3, 32, 32});
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = bytes[i * kCifarRecord];
    if (label > 9) {
      throw FormatError(path + ": label byte " + std::to_string(label) +
                        " in record " + std::to_string(i));
    }
    out.labels.push_back(label);
    const std::uint8_t* pixels = &bytes[i * kCifarRecord + 1];
    double* dst = &out.images.data[i * 3072];
    for (std::size_t j = 0; j < 3072; ++j) {
      dst[j] = static_cast<double>(pixels[j]) / 255.0;
    }
  }
  return out;
}

void write_tensor_file(const std::string& path, const Tensor& tensor) {
  std::vector<std::uint8_t> bytes;
  bytes.push_back('C');
  bytes.push_back('F');
  bytes.push_back('T');
  bytes.push_back('D');
  put_u32(bytes, 1);
  put_u32(bytes, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape) {
    put_u32(bytes, static_cast<std::uint32_t>(d));
  }
  for (double v : tensor.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) bytes.push_back((bits >> (8 * i)) & 0xff);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

Tensor read_tensor_file(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CFTD", 4) != 0) {
    throw FormatError(path + ": bad tensor magic");
  }
  std::size_t pos = 4;
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != 1) {
    throw FormatError(path + ": unsupported tensor version " +
                      std::to_string(version));
  }
  const std::uint32_t rank = get_u32(bytes, pos);
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = get_u32(bytes, pos);
  const std::size_t count = shape_numel(shape);
  if (pos + 8 * count != bytes.size()) {
    throw FormatError(path + ": payload size mismatch");
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[pos++]} << (8 * b);
    std::memcpy(&data[i], &bits, sizeof(double));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(data);
  return t;
}

UnlabeledDataset load_tensor_file(const std::string& path, std::size_t target_h,
                                  std::size_t target_w) {
  Tensor t = read_tensor_file(path);
  if (t.rank() != 4) {
    throw FormatError(path + ": unlabeled pool must be rank 4, got rank " +
                      std::to_string(t.rank()));
  }
  UnlabeledDataset out;
  if (target_h > 0 && target_w > 0 &&
      (t.shape[2] != target_h || t.shape[3] != target_w)) {
    out.images = resize_bilinear(t, target_h, target_w);
  } else {
    out.images = std::move(t);
  }
  return out;
}

LabeledDataset load_labeled_tensor_files(const std::string& images_path,
                                         const std::string& labels_path) {
  Tensor images = read_tensor_file(images_path);
  if (images.rank() != 4) {
    throw FormatError(images_path + ": labeled images must be rank 4");
  }
  Tensor labels = read_tensor_file(labels_path);
  if (labels.rank() != 1 || labels.shape[0] != images.shape[0]) {
    throw FormatError(labels_path + ": labels must be rank 1 and match " +
                      std::to_string(images.shape[0]) + " images");
  }
  LabeledDataset out;
  out.images = std::move(images);
  int max_label = 0;
  for (double v : labels.data) {
    const int label = static_cast<int>(v);
    if (label < 0 || static_cast<double>(label) != v) {
      throw FormatError(labels_path + ": non-integer or negative label");
    }
    out.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  out.class_count = max_label + 1;
  return out;
}

Tensor resize_bilinear(const Tensor& images, std::size_t out_h,
                       std::size_t out_w) {
  if (images.rank() != 4) throw ShapeError("resize expects [N,C,H,W]");
  if (out_h < 1 || out_w < 1) throw SizeError("resize target must be >= 1x1");
  const std::size_t n = images.shape[0], c = images.shape[1],
                    h = images.shape[2], w = images.shape[3];
  if (h == out_h && w == out_w) return images;

  Tensor out = zeros({n, c, out_h, out_w});
  const double sy =
      out_h > 1 ? static_cast<double>(h - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx =
      out_w > 1 ? static_cast<double>(w - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = &images.data[(b * c + ch) * h * w];
      double* dst = &out.data[(b * c + ch) * out_h * out_w];
      for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = sy * static_cast<double>(y);
        const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
          const double fx = sx * static_cast<double>(x);
          const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 1);
          const std::size_t x1 = std::min(x0 + 1, w - 1);
          const double wx = fx - static_cast<double>(x0);
          const double top =
              (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
          const double bottom =
              (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
          dst[y * out_w + x] = (1.0 - wy) * top + wy * bottom;
        }
      }
    }
  }
  return out;
}

Tensor augment_crop_flip(const Tensor& image, std::size_t pad,
                         std::size_t off_y, std::size_t off_x, bool flip) {
  if (image.rank() != 3) throw ShapeError("augment expects a [C,H,W] image");
  if (off_y > 2 * pad || off_x > 2 * pad) {
    throw SizeError("crop offset outside the padded frame");
  }
  const std::size_t c = image.shape[0], h = image.shape[1], w = image.shape[2];
  Tensor out = zeros({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = &image.data[ch * h * w];
    double* dst = &out.data[ch * h * w];
    for (std::size_t y = 0; y < h; ++y) {
      const std::int64_t sy = static_cast<std::int64_t>(y + off_y) -
                              static_cast<std::int64_t>(pad);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t tx = flip ? w - 1 - x : x;
        const std::int64_t sx = static_cast<std::int64_t>(x + off_x) -
                                static_cast<std::int64_t>(pad);
        double v = 0.0;
        if (sy >= 0 && sy < static_cast<std::int64_t>(h) && sx >= 0 &&
            sx < static_cast<std::int64_t>(w)) {
          v = src[static_cast<std::size_t>(sy) * w +
                  static_cast<std::size_t>(sx)];
        }
        dst[y * w + tx] = v;
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& image, Rng& rng, std::size_t pad) {
  const std::size_t off_y = rng.uniform_int(2 * pad + 1);
  const std::size_t off_x = rng.uniform_int(2 * pad + 1);
  const bool flip = rng.coin();
  return augment_crop_flip(image, pad, off_y, off_x, flip);
}

SynthData synth_generate(const SynthConfig& config) {
  if (config.class_count < 2) throw ConfigError("synth class_count must be >= 2");
  if (config.height < 24 || config.width < 24) {
    throw ConfigError("synth images must be at least 24x24");
  }
  Rng rng(config.seed);
  const std::size_t plane = config.height * config.width;

  auto make_labeled = [&](std::size_t count) {
    LabeledDataset set;
    set.class_count = config.class_count;
    set.images = zeros({count, 3, config.height, config.width});
    set.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const int klass =
          static_cast<int>(i % static_cast<std::size_t>(config.class_count));
      set.labels[i] = klass;
      draw_synth_image(&set.images.data[i * 3 * plane], klass, config.height,
                       config.width, 0.0, 0, rng);
    }
    return set;
  };

  SynthData out;
  out.labeled = make_labeled(config.n_labeled);
  out.test = make_labeled(config.n_test);

  const double brightness = 0.5 * config.bias_shift;
  const auto shift = static_cast<std::size_t>(
      std::llround(6.0 * std::max(0.0, config.bias_shift)));
  const auto junk = static_cast<std::size_t>(
      static_cast<double>(config.n_unlabeled) *
      std::min(1.0, std::max(0.0, config.junk_fraction)));
  out.unlabeled.images =
      zeros({config.n_unlabeled, 3, config.height, config.width});
  for (std::size_t i = 0; i < config.n_unlabeled; ++i) {
    double* dst = &out.unlabeled.images.data[i * 3 * plane];
    const int klass =
        i < junk ? -1
                 : static_cast<int>(i % static_cast<std::size_t>(config.class_count));
    draw_synth_image(dst, klass, config.height, config.width, brightness, shift,
                     rng);
  }
  return out;
}

Normalizer dataset_normalizer(const LabeledDataset& dataset) {
  const std::size_t n = dataset.images.shape[0], c = dataset.images.shape[1],
                    plane = dataset.images.shape[2] * dataset.images.shape[3];
  Normalizer norm;
  norm.mean.assign(c, 0.0);
  norm.stddev.assign(c, 1.0);
  if (n == 0) return norm;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* src = &dataset.images.data[(b * c + ch) * plane];
      for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    }
    norm.mean[ch] = acc / static_cast<double>(n * plane);
    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* src = &dataset.images.data[(b * c + ch) * plane];
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = src[i] - norm.mean[ch];
        var += d * d;
      }
    }
    norm.stddev[ch] =
        std::max(1e-8, std::sqrt(var / static_cast<double>(n * plane)));
  }
  return norm;
}

Tensor apply_normalizer(const Tensor& images, const Normalizer& normalizer) {
  if (normalizer.mean.empty()) return images;
  if (images.rank() != 4) throw ShapeError("normalizer expects [N,C,H,W]");
  const std::size_t n = images.shape[0], c = images.shape[1],
                    plane = images.shape[2] * images.shape[3];
  if (normalizer.mean.size() != c || normalizer.stddev.size() != c) {
    throw SizeError("normalizer channel count mismatch");
  }
  Tensor out = images;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = &out.data[(b * c + ch) * plane];
      const double m = normalizer.mean[ch];
      const double inv = 1.0 / normalizer.stddev[ch];
      for (std::size_t i = 0; i < plane; ++i) dst[i] = (dst[i] - m) * inv;
    }
  }
  return out;
}

namespace {

Tensor copy_image(const Tensor& pool, std::size_t index) {
  const std::size_t c = pool.shape[1], h = pool.shape[2], w = pool.shape[3];
  const std::size_t image_size = c * h * w;
  Tensor image;
  image.shape = {c, h, w};
  image.data.assign(
      pool.data.begin() + static_cast<std::ptrdiff_t>(index * image_size),
      pool.data.begin() + static_cast<std::ptrdiff_t>((index + 1) * image_size));
  return image;
}

}  // namespace

Batch sample_minibatch(const LabeledDataset& labeled,
                       const UnlabeledDataset* unlabeled,
                       const BatchOptions& opts, const Model* teacher,
                       const Normalizer& normalizer, Rng& rng) {
  if (opts.n_labeled == 0) throw DataError("labeled minibatch size must be >= 1");
  if (labeled.images.shape.empty() || labeled.images.shape[0] == 0) {
    throw DataError("labeled pool is empty");
  }
  const bool want_unlabeled = unlabeled != nullptr && opts.n_unlabeled > 0;
  if (want_unlabeled && unlabeled->images.shape[0] == 0) {
    throw DataError("unlabeled pool is empty");
  }

  Batch batch;
  const std::size_t c = labeled.images.shape[1], h = labeled.images.shape[2],
                    w = labeled.images.shape[3];
  const std::size_t image_size = c * h * w;

  // Labeled pool first, then unlabeled; per-image draws are index followed
  // by augmentation parameters, which pins the rng consumption order.
  batch.labeled_images = zeros({opts.n_labeled, c, h, w});
  batch.labels.resize(opts.n_labeled);
  for (std::size_t i = 0; i < opts.n_labeled; ++i) {
    const std::size_t idx = rng.uniform_int(labeled.images.shape[0]);
    batch.labels[i] = labeled.labels[idx];
    Tensor image = copy_image(labeled.images, idx);
    if (opts.augment) image = augment(image, rng, opts.augment_pad);
    std::copy(image.data.begin(), image.data.end(),
              batch.labeled_images.data.begin() +
                  static_cast<std::ptrdiff_t>(i * image_size));
  }
  batch.labeled_images = apply_normalizer(batch.labeled_images, normalizer);

  if (want_unlabeled) {
    Tensor raw = zeros({opts.n_unlabeled, c, h, w});
    for (std::size_t i = 0; i < opts.n_unlabeled; ++i) {
      const std::size_t idx = rng.uniform_int(unlabeled->images.shape[0]);
      Tensor image = copy_image(unlabeled->images, idx);
      if (opts.augment) image = augment(image, rng, opts.augment_pad);
      std::copy(image.data.begin(), image.data.end(),
                raw.data.begin() + static_cast<std::ptrdiff_t>(i * image_size));
    }
    batch.unlabeled_images = apply_normalizer(raw, normalizer);
  } else {
    batch.unlabeled_images = zeros({0, c, h, w});
  }
  batch.n_prime = opts.n_labeled + batch.unlabeled_images.shape[0];

  if (teacher != nullptr) {
    const double conf_tau =
        opts.confidence_tau > 0.0 ? opts.confidence_tau : opts.tau;
    batch.teacher_labeled = make_teacher_output(
        infer(*teacher, batch.labeled_images), opts.tau, conf_tau);
    if (!opts.confidence_weighting) {
      batch.teacher_labeled.confidence = full({opts.n_labeled}, 1.0);
    }
    if (want_unlabeled) {
      batch.teacher_unlabeled = make_teacher_output(
          infer(*teacher, batch.unlabeled_images), opts.tau, conf_tau);
      if (!opts.confidence_weighting) {
        batch.teacher_unlabeled.confidence =
            full({batch.unlabeled_images.shape[0]}, 1.0);
      }
    }
  }
  return batch;
}

}  // namespace cf
