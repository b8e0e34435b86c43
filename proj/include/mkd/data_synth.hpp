#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mkd/tensor.hpp"

namespace mkd {

/// Appearance family of a phantom. Geometry never depends on the style.
enum class ModalityStyle { A, B };

/// Role a dataset plays during training.
enum class Modality { assistant, target };

std::string to_string(ModalityStyle s);
std::string to_string(Modality m);
ModalityStyle parse_style(const std::string& s);
Modality parse_modality(const std::string& s);

struct PhantomSpec {
  int image_size = 64;
  int num_classes = 4;
  std::uint64_t geometry_seed = 0;
  ModalityStyle modality_style = ModalityStyle::B;
  std::vector<double> intensity_map;  ///< per-class mean intensity in [-1, 1]
  double noise_sigma = 0.0;
  double bias_strength = 0.0;  ///< multiplicative bias-field amplitude, [0, 1)

  /// Throws ConfigError on num_classes < 2, image_size < 16 or inconsistent fields.
  void validate() const;
};

/// Spec with the style's default intensities, noise and bias field.
PhantomSpec default_phantom_spec(ModalityStyle style, int image_size = 64, int num_classes = 4,
                                 std::uint64_t geometry_seed = 0);

struct LabeledSample {
  Image image;  ///< (1, H, W), values in [-1, 1], exactly representable as float
  LabelMap label;
  Modality modality = Modality::target;

  bool operator==(const LabeledSample&) const = default;
};

struct Dataset {
  std::vector<LabeledSample> samples;
  Modality modality = Modality::target;
  int num_classes = 0;

  std::size_t size() const { return samples.size(); }
  int image_size() const { return samples.empty() ? 0 : samples.front().image.height(); }
  /// Throws InputError when samples disagree on modality, shape, or labels exceed num_classes.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

/// Deterministic phantom for (spec, sample_seed).
LabeledSample synthesize_sample(const PhantomSpec& spec, std::uint64_t sample_seed,
                                Modality modality = Modality::target);

/// `count` phantoms with sample seeds first_seed, first_seed + 1, ...
Dataset synthesize_dataset(const PhantomSpec& spec, int count, std::uint64_t first_seed, Modality modality);

/// Label-preserving augmentations, applied identically to image and label.
enum class Augmentation { identity, flip_horizontal, flip_vertical, rotate90, rotate180, rotate270 };

Augmentation choose_augmentation(std::uint64_t rng_seed);
LabeledSample apply_augmentation(const LabeledSample& s, Augmentation a);
LabeledSample augment_sample(const LabeledSample& s, std::uint64_t rng_seed);

/// Writes `<dir>/meta.txt` plus `<dir>/<index>.pxm` per sample.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
/// Reads a directory written by write_dataset. Throws FormatError naming the offending file.
Dataset read_dataset(const std::filesystem::path& dir);

/// Single-sample binary I/O (32-byte header, float32 image, uint8 labels).
void write_sample_file(const LabeledSample& s, int num_classes, const std::filesystem::path& file);
LabeledSample read_sample_file(const std::filesystem::path& file, int expected_classes, Modality modality);

}  // namespace mkd
