#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cf/losses.hpp"
#include "cf/model.hpp"
#include "cf/rng.hpp"
#include "cf/tensor.hpp"

namespace cf {

// Per-channel normalization applied at batch-assembly and eval time.
// Empty vectors mean identity.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct LabeledDataset {
  Tensor images;  // [N, C, H, W] in [0,1]
  std::vector<int> labels;
  int class_count = 0;
};

struct UnlabeledDataset {
  Tensor images;  // [N, C, H, W] in [0,1], dims matching the labeled data
};

// One mixed minibatch: augmented+normalized images as the student consumes
// them, with frozen teacher responses attached for every example.
struct Batch {
  Tensor labeled_images;
  std::vector<int> labels;
  Tensor unlabeled_images;  // zero rows when the unlabeled pool is absent
  TeacherOutput teacher_labeled;
  TeacherOutput teacher_unlabeled;
  std::size_t n_prime = 0;
};

// CIFAR-10 binary layout: records of 3073 bytes, one label byte followed by
// 3072 channel-major pixels. Pixels land in [0,1].
LabeledDataset load_cifar10(const std::string& path);

// Raw tensor container "CFTD": magic, u32 version, u32 rank, u32 dims,
// f64 payload, little-endian, bit-exact round-trips.
void write_tensor_file(const std::string& path, const Tensor& tensor);
Tensor read_tensor_file(const std::string& path);

// Rank-4 CFTD file as an unlabeled pool, resized when target dims are given
// and disagree.
UnlabeledDataset load_tensor_file(const std::string& path,
                                  std::size_t target_h = 0,
                                  std::size_t target_w = 0);

// CFTD pair (images rank-4, labels rank-1) as a labeled dataset.
LabeledDataset load_labeled_tensor_files(const std::string& images_path,
                                         const std::string& labels_path);

// Corner-aligned bilinear resize of an [N,C,H,W] stack.
Tensor resize_bilinear(const Tensor& images, std::size_t out_h,
                       std::size_t out_w);

// Deterministic augmentation core: zero-pad, crop at the given offset, then
// optional horizontal flip. offsets in [0, 2*pad].
Tensor augment_crop_flip(const Tensor& image, std::size_t pad,
                         std::size_t off_y, std::size_t off_x, bool flip);

// Random pad-crop-flip; draws offsets then the flip bit from rng.
Tensor augment(const Tensor& image, Rng& rng, std::size_t pad = 4);

// ---------------------------------------------------------------------------
// Synthetic task: class = spatial pattern (stripe/checker/disc family and
// scale); color, position, phase and lighting are per-image nuisance. The
// unlabeled pool shares the classes but is shifted in brightness and
// pattern position by bias_shift; junk_fraction of it is replaced by
// uniform noise the teacher cannot explain.
// ---------------------------------------------------------------------------
struct SynthConfig {
  std::uint64_t seed = 1;
  int class_count = 8;
  std::size_t n_labeled = 1000;
  std::size_t n_unlabeled = 1000;
  std::size_t n_test = 1000;
  double bias_shift = 0.0;
  double junk_fraction = 0.0;
  std::size_t height = 32;
  std::size_t width = 32;
};

struct SynthData {
  LabeledDataset labeled;
  UnlabeledDataset unlabeled;
  LabeledDataset test;
};

SynthData synth_generate(const SynthConfig& config);

// ---------------------------------------------------------------------------
// Minibatch assembly
// ---------------------------------------------------------------------------
struct BatchOptions {
  std::size_t n_labeled = 64;
  std::size_t n_unlabeled = 64;
  double tau = 3.0;
  double confidence_tau = 0.0;      // 0 = share tau
  bool confidence_weighting = true; // off forces confidences to 1
  bool augment = false;
  std::size_t augment_pad = 4;
};

// Uniform sampling with replacement; the teacher (when given) is forwarded
// in eval mode on exactly the images the student will see.
Batch sample_minibatch(const LabeledDataset& labeled,
                       const UnlabeledDataset* unlabeled,
                       const BatchOptions& opts, const Model* teacher,
                       const Normalizer& normalizer, Rng& rng);

Normalizer dataset_normalizer(const LabeledDataset& dataset);
Tensor apply_normalizer(const Tensor& images, const Normalizer& normalizer);

}  // namespace cf
