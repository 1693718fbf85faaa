#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/rng.hpp"
#include "forgetlab/tensor.hpp"

namespace forgetlab {

/// Immutable labelled samples; inputs are row-major, one sample after another.
struct Dataset {
  Shape sample_shape;
  std::vector<double> inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return shape_numel(sample_shape); }
  std::span<const double> sample(std::size_t i) const {
    return std::span<const double>(inputs).subspan(i * sample_size(), sample_size());
  }
  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct TaskDataset {
  int task_index = 1;  // 1-based
  Dataset data;
  std::vector<int> class_set;  // sorted

  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

enum class StreamMode { class_il, domain_il };
enum class DomainTransform { permute_pixels, rotate };

std::string_view to_string(StreamMode mode);
std::string_view to_string(DomainTransform transform);

/// Splits the classes into T contiguous, ascending chunks of equal size.
std::vector<TaskDataset> split_class_il(const Dataset& dataset, std::size_t num_classes, std::size_t tasks,
                                        std::uint64_t seed);
/// Same, with explicit chunk sizes (e.g. {3,3,3,1}). Throws BadPartition
/// when the sizes do not sum to num_classes or a chunk is empty.
std::vector<TaskDataset> split_class_il(const Dataset& dataset, std::size_t num_classes,
                                        std::span<const std::size_t> chunks, std::uint64_t seed);

/// Task 1 is the base task unchanged; task t applies the t-th transform.
/// permute_pixels draws one fixed permutation per task; rotate turns images
/// clockwise by (t-1)*rotate_step_deg with nearest-neighbour sampling.
std::vector<TaskDataset> make_domain_stream(const TaskDataset& base, std::size_t tasks, DomainTransform transform,
                                            std::uint64_t seed, double rotate_step_deg = 90.0);

/// Clockwise rotation of every [C,H,W] (or [H,W]) sample.
Dataset rotate_images(const Dataset& data, double degrees);
Dataset permute_features(const Dataset& data, std::span<const std::size_t> permutation);

/// Isotropic unit-variance Gaussian classes around seeded centroids whose
/// pairwise distances are all >= sep. Samples are ordered class by class.
Dataset synth_gaussian(std::size_t num_classes, std::size_t dim, std::size_t per_class, double sep,
                       std::uint64_t seed);

/// Centroids used by synth_gaussian for the same arguments.
std::vector<std::vector<double>> synth_centroids(std::size_t num_classes, std::size_t dim, double sep,
                                                 std::uint64_t seed);

/// IDX image/label pair (magic 0x00000803 / 0x00000801); pixels scaled to
/// [0,1]; samples shaped [1, rows, cols].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
Dataset parse_idx(std::string_view image_bytes, std::string_view label_bytes);

struct TaskSplit {
  TaskDataset train;
  TaskDataset val;
};

/// Holds out round(fraction * n) samples, chosen by seed.
TaskSplit split_validation(const TaskDataset& task, double fraction, std::uint64_t seed);

struct StreamSpec {
  StreamMode mode = StreamMode::class_il;
  std::size_t tasks = 5;
  std::vector<std::size_t> class_chunks;  // class-IL; empty means equal chunks
  std::string source = "synthetic_gaussian";  // or "idx_files"
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  Shape image_shape;  // optional reshaping of synthetic samples, e.g. {1,8,8}
  std::size_t per_class = 500;
  double sep = 6.0;
  std::string idx_images;
  std::string idx_labels;
  DomainTransform transform = DomainTransform::permute_pixels;
  double rotate_step_deg = 90.0;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct Stream {
  StreamMode mode = StreamMode::class_il;
  std::size_t num_classes = 0;
  Shape sample_shape;
  std::vector<TaskSplit> tasks;
};

Stream build_stream(const StreamSpec& spec);

/// Throws BadPartition when class-IL sets overlap, domain-IL sets differ, or
/// a label lies outside its task's class set.
void validate_stream(const Stream& stream);

/// Versioned JSON fixture of a dataset (shape, labels, inputs).
std::string dataset_to_json(const Dataset& data);
Dataset dataset_from_json(std::string_view json);

}  // namespace forgetlab
