#include "forgetlab/streams.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "forgetlab/binary_io.hpp"
#include "forgetlab/error.hpp"

namespace forgetlab {

std::string_view to_string(StreamMode mode) { return mode == StreamMode::class_il ? "class_il" : "domain_il"; }

std::string_view to_string(DomainTransform transform) {
  return transform == DomainTransform::permute_pixels ? "permute_pixels" : "rotate";
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{sample_shape, {}, {}};
  out.inputs.reserve(indices.size() * sample_size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    auto s = sample(i);
    out.inputs.insert(out.inputs.end(), s.begin(), s.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

// ---- class-IL --------------------------------------------------------------

std::vector<TaskDataset> split_class_il(const Dataset& dataset, std::size_t num_classes, std::size_t tasks,
                                        std::uint64_t seed) {
  if (tasks == 0 || num_classes % tasks != 0) {
    fail(ErrorCode::bad_partition, fmt::format("{} classes do not split into {} equal tasks", num_classes, tasks));
  }
  std::vector<std::size_t> chunks(tasks, num_classes / tasks);
  return split_class_il(dataset, num_classes, chunks, seed);
}

std::vector<TaskDataset> split_class_il(const Dataset& dataset, std::size_t num_classes,
                                        std::span<const std::size_t> chunks, std::uint64_t seed) {
  const std::size_t total = std::accumulate(chunks.begin(), chunks.end(), std::size_t{0});
  if (chunks.empty() || total != num_classes || std::find(chunks.begin(), chunks.end(), 0U) != chunks.end()) {
    fail(ErrorCode::bad_partition, fmt::format("chunk sizes sum to {}, expected {} non-empty", total, num_classes));
  }
  std::vector<int> task_of(num_classes);
  std::vector<TaskDataset> out;
  int next_class = 0;
  for (std::size_t t = 0; t < chunks.size(); ++t) {
    TaskDataset task;
    task.task_index = static_cast<int>(t + 1);
    for (std::size_t k = 0; k < chunks[t]; ++k) {
      task.class_set.push_back(next_class);
      task_of[static_cast<std::size_t>(next_class)] = static_cast<int>(t);
      ++next_class;
    }
    out.push_back(std::move(task));
  }
  std::vector<std::vector<std::size_t>> members(chunks.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int y = dataset.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      fail(ErrorCode::bad_partition, fmt::format("label {} outside 0..{}", y, num_classes - 1));
    }
    members[static_cast<std::size_t>(task_of[static_cast<std::size_t>(y)])].push_back(i);
  }
  Rng rng(seed);
  for (std::size_t t = 0; t < chunks.size(); ++t) {
    Rng task_rng = rng.fork(t);
    task_rng.shuffle(std::span<std::size_t>(members[t]));
    out[t].data = dataset.subset(members[t]);
  }
  return out;
}

// ---- domain-IL -------------------------------------------------------------

Dataset permute_features(const Dataset& data, std::span<const std::size_t> permutation) {
  const std::size_t d = data.sample_size();
  if (permutation.size() != d) fail(ErrorCode::shape_mismatch, "permutation length does not match sample size");
  Dataset out = data;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto src = data.sample(i);
    for (std::size_t j = 0; j < d; ++j) out.inputs[i * d + j] = src[permutation[j]];
  }
  return out;
}

Dataset rotate_images(const Dataset& data, double degrees) {
  const auto& s = data.sample_shape;
  if (s.size() != 2 && s.size() != 3) {
    fail(ErrorCode::unsupported_transform, "rotate needs [H,W] or [C,H,W] samples");
  }
  const std::size_t C = s.size() == 3 ? s[0] : 1;
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];

  // Source pixel for every destination pixel (or npos when outside).
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> source(H * W, npos);
  const double turns = degrees / 90.0;
  const bool quarter = std::abs(turns - std::round(turns)) < 1e-12;
  const long q = ((static_cast<long>(std::llround(turns)) % 4) + 4) % 4;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cy = (static_cast<double>(H) - 1.0) / 2.0, cx = (static_cast<double>(W) - 1.0) / 2.0;
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      std::ptrdiff_t si = 0, sj = 0;
      if (quarter && H == W) {
        const auto n = static_cast<std::ptrdiff_t>(H);
        const auto ii = static_cast<std::ptrdiff_t>(i), jj = static_cast<std::ptrdiff_t>(j);
        // Clockwise by q quarter turns: dst(i,j) = src(n-1-j, i) per turn.
        switch (q) {
          case 0: si = ii; sj = jj; break;
          case 1: si = n - 1 - jj; sj = ii; break;
          case 2: si = n - 1 - ii; sj = n - 1 - jj; break;
          default: si = jj; sj = n - 1 - ii; break;
        }
      } else {
        const double x = static_cast<double>(j) - cx, y = static_cast<double>(i) - cy;
        const double sx = x * std::cos(rad) + y * std::sin(rad);
        const double sy = -x * std::sin(rad) + y * std::cos(rad);
        si = static_cast<std::ptrdiff_t>(std::llround(sy + cy));
        sj = static_cast<std::ptrdiff_t>(std::llround(sx + cx));
      }
      if (si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(H) && sj < static_cast<std::ptrdiff_t>(W)) {
        source[i * W + j] = static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj);
      }
    }
  }
  Dataset out = data;
  const std::size_t d = data.sample_size();
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = n * d + c * H * W;
      for (std::size_t p = 0; p < H * W; ++p) {
        out.inputs[base + p] = source[p] == npos ? 0.0 : data.inputs[base + source[p]];
      }
    }
  }
  return out;
}

std::vector<TaskDataset> make_domain_stream(const TaskDataset& base, std::size_t tasks, DomainTransform transform,
                                            std::uint64_t seed, double rotate_step_deg) {
  if (tasks == 0) fail(ErrorCode::bad_partition, "domain stream needs at least one task");
  std::vector<TaskDataset> out;
  Rng rng(seed);
  for (std::size_t t = 0; t < tasks; ++t) {
    TaskDataset task{static_cast<int>(t + 1), base.data, base.class_set};
    if (t > 0) {
      switch (transform) {
        case DomainTransform::permute_pixels: {
          Rng task_rng = rng.fork(t);
          const auto perm = task_rng.permutation(base.data.sample_size());
          task.data = permute_features(base.data, perm);
          break;
        }
        case DomainTransform::rotate:
          task.data = rotate_images(base.data, static_cast<double>(t) * rotate_step_deg);
          break;
      }
    }
    out.push_back(std::move(task));
  }
  return out;
}

// ---- synthetic Gaussians ---------------------------------------------------

std::vector<std::vector<double>> synth_centroids(std::size_t num_classes, std::size_t dim, double sep,
                                                 std::uint64_t seed) {
  if (!(sep > 0.0)) fail(ErrorCode::infeasible_separation, "sep must be positive");
  if (dim == 0) fail(ErrorCode::infeasible_separation, "dim must be positive");
  constexpr int max_tries = 10000;
  Rng rng = Rng(seed).fork(0xC3);
  // Expected pairwise distance of N(0, s^2 I) centroids is about s*sqrt(2*dim).
  const double spread = 1.5 * sep / std::sqrt(2.0 * static_cast<double>(dim));
  std::vector<std::vector<double>> centroids;
  for (std::size_t c = 0; c < num_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < max_tries && !placed; ++attempt) {
      std::vector<double> cand(dim);
      for (auto& v : cand) v = spread * rng.normal();
      placed = std::all_of(centroids.begin(), centroids.end(), [&](const std::vector<double>& o) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < dim; ++k) d2 += (cand[k] - o[k]) * (cand[k] - o[k]);
        return d2 >= sep * sep;
      });
      if (placed) centroids.push_back(std::move(cand));
    }
    if (!placed) {
      fail(ErrorCode::infeasible_separation,
           fmt::format("could not place centroid {} at separation {} in {} dims", c, sep, dim));
    }
  }
  return centroids;
}

Dataset synth_gaussian(std::size_t num_classes, std::size_t dim, std::size_t per_class, double sep,
                       std::uint64_t seed) {
  const auto centroids = synth_centroids(num_classes, dim, sep, seed);
  Rng rng = Rng(seed).fork(0x5A);
  Dataset out{Shape{dim}, {}, {}};
  out.inputs.reserve(num_classes * per_class * dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < dim; ++k) out.inputs.push_back(centroids[c][k] + rng.normal());
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

// ---- IDX -------------------------------------------------------------------

namespace {

std::uint32_t be32(std::string_view bytes, std::size_t offset) {
  if (bytes.size() < offset + 4) fail(ErrorCode::truncated, "IDX header truncated");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

}  // namespace

Dataset parse_idx(std::string_view image_bytes, std::string_view label_bytes) {
  if (be32(image_bytes, 0) != 0x00000803U) fail(ErrorCode::bad_magic, "image file magic is not 0x00000803");
  if (be32(label_bytes, 0) != 0x00000801U) fail(ErrorCode::bad_magic, "label file magic is not 0x00000801");
  const std::size_t n = be32(image_bytes, 4);
  const std::size_t rows = be32(image_bytes, 8);
  const std::size_t cols = be32(image_bytes, 12);
  const std::size_t n_labels = be32(label_bytes, 4);
  if (n != n_labels) fail(ErrorCode::count_mismatch, fmt::format("{} images but {} labels", n, n_labels));
  const std::size_t pixels = rows * cols;
  if (image_bytes.size() < 16 + n * pixels) fail(ErrorCode::truncated, "IDX image payload truncated");
  if (label_bytes.size() < 8 + n) fail(ErrorCode::truncated, "IDX label payload truncated");

  Dataset out{Shape{1, rows, cols}, {}, {}};
  out.inputs.resize(n * pixels);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n * pixels; ++i) {
    out.inputs[i] = static_cast<double>(static_cast<unsigned char>(image_bytes[16 + i])) / 255.0;
  }
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = static_cast<unsigned char>(label_bytes[8 + i]);
  return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  return parse_idx(read_file(images_path), read_file(labels_path));
}

// ---- streams ---------------------------------------------------------------

TaskSplit split_validation(const TaskDataset& task, double fraction, std::uint64_t seed) {
  const std::size_t n = task.data.size();
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  Rng rng(seed);
  auto perm = rng.permutation(n);
  std::vector<std::size_t> val_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  return {TaskDataset{task.task_index, task.data.subset(train_idx), task.class_set},
          TaskDataset{task.task_index, task.data.subset(val_idx), task.class_set}};
}

Stream build_stream(const StreamSpec& spec) {
  if (spec.tasks < 1) fail(ErrorCode::config_invalid, "stream.tasks must be >= 1");
  Rng root(spec.seed);
  Dataset base;
  std::size_t num_classes = spec.num_classes;
  if (spec.source == "synthetic_gaussian") {
    base = synth_gaussian(spec.num_classes, spec.dim, spec.per_class, spec.sep, root.fork(1).next_u64());
    if (!spec.image_shape.empty()) {
      if (shape_numel(spec.image_shape) != spec.dim) {
        fail(ErrorCode::config_invalid, "stream.image_shape must hold exactly dim values");
      }
      base.sample_shape = spec.image_shape;
    }
  } else if (spec.source == "idx_files") {
    base = load_idx(spec.idx_images, spec.idx_labels);
    const int max_label = base.labels.empty() ? -1 : *std::max_element(base.labels.begin(), base.labels.end());
    num_classes = std::max<std::size_t>(spec.num_classes, static_cast<std::size_t>(max_label + 1));
  } else {
    fail(ErrorCode::config_invalid, fmt::format("unknown stream source '{}'", spec.source));
  }

  std::vector<TaskDataset> tasks;
  const std::uint64_t split_seed = root.fork(2).next_u64();
  if (spec.mode == StreamMode::class_il) {
    tasks = spec.class_chunks.empty() ? split_class_il(base, num_classes, spec.tasks, split_seed)
                                      : split_class_il(base, num_classes, spec.class_chunks, split_seed);
  } else {
    TaskDataset all{1, base, {}};
    for (std::size_t c = 0; c < num_classes; ++c) all.class_set.push_back(static_cast<int>(c));
    tasks = make_domain_stream(all, spec.tasks, spec.transform, split_seed, spec.rotate_step_deg);
  }

  Stream stream{spec.mode, num_classes, base.sample_shape, {}};
  Rng val_rng = root.fork(3);
  for (const auto& t : tasks) stream.tasks.push_back(split_validation(t, spec.val_fraction, val_rng.next_u64()));
  validate_stream(stream);
  return stream;
}

void validate_stream(const Stream& stream) {
  for (std::size_t i = 0; i < stream.tasks.size(); ++i) {
    for (const auto* part : {&stream.tasks[i].train, &stream.tasks[i].val}) {
      for (int y : part->data.labels) {
        if (!std::binary_search(part->class_set.begin(), part->class_set.end(), y)) {
          fail(ErrorCode::bad_partition, fmt::format("task {} label {} outside its class set", i + 1, y));
        }
      }
    }
    for (std::size_t j = i + 1; j < stream.tasks.size(); ++j) {
      const auto& a = stream.tasks[i].train.class_set;
      const auto& b = stream.tasks[j].train.class_set;
      if (stream.mode == StreamMode::domain_il) {
        if (a != b) fail(ErrorCode::bad_partition, "domain-IL tasks must share one class set");
      } else {
        std::vector<int> common;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
        if (!common.empty()) fail(ErrorCode::bad_partition, "class-IL class sets overlap");
      }
    }
  }
}

// ---- fixtures --------------------------------------------------------------

std::string dataset_to_json(const Dataset& data) {
  nlohmann::ordered_json j;
  j["format"] = "forgetlab-dataset";
  j["version"] = 1;
  j["sample_shape"] = data.sample_shape;
  j["labels"] = data.labels;
  j["inputs"] = data.inputs;
  return j.dump();
}

Dataset dataset_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "forgetlab-dataset" || j.at("version") != 1) {
      fail(ErrorCode::bad_format, "not a version-1 dataset fixture");
    }
    Dataset d{j.at("sample_shape").get<Shape>(), j.at("inputs").get<std::vector<double>>(),
              j.at("labels").get<std::vector<int>>()};
    if (d.inputs.size() != d.labels.size() * d.sample_size()) fail(ErrorCode::bad_format, "fixture size mismatch");
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::bad_format, e.what());
  }
}

}  // namespace forgetlab
