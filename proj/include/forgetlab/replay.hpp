#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/nn.hpp"
#include "forgetlab/rng.hpp"

namespace forgetlab {

struct BufferItem {
  std::vector<double> input;
  int label = 0;
  std::optional<std::vector<double>> logits;  // captured at insertion time
  std::uint64_t insertion_step = 0;

  friend bool operator==(const BufferItem&, const BufferItem&) = default;
};

/// Fixed-capacity reservoir of stream samples.
///
/// While fewer than `capacity` examples have been seen, the next one is
/// stored at index seen_count. Afterwards k is drawn uniformly from
/// [0, seen_count] and the item replaces slot k when k < capacity, so the
/// (S+1)-th example is kept with probability capacity/(S+1).
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0, std::uint64_t seed = 0);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::uint64_t seen_count() const { return seen_; }

  /// Chooses the slot for the next stream example, or nullopt when the
  /// example is discarded. Always counts the example as seen.
  std::optional<std::size_t> reserve_slot();
  void store(std::size_t slot, BufferItem item);

  /// reserve_slot + store. Returns true when the item was kept.
  bool insert(BufferItem item);

  /// Uniform without replacement; the whole buffer (in stored order) when
  /// batch_size >= size(). Throws EmptyBuffer.
  std::vector<BufferItem> sample_batch(std::size_t batch_size, Rng& rng) const;
  /// Items at the given positions.
  std::vector<BufferItem> gather(std::span<const std::size_t> indices) const;

  /// Items without touching the read counter; for persistence and tests.
  const std::vector<BufferItem>& items() const { return items_; }

  /// Number of sample_batch/gather calls; lets callers prove they did not
  /// read the buffer.
  std::uint64_t read_count() const { return reads_; }

  const Rng& rng() const { return rng_; }

  /// Versioned binary dump including seen_count and RNG state.
  std::string encode() const;
  static ReplayBuffer decode(std::string_view bytes);
  void save(const std::string& path) const;
  static ReplayBuffer load(const std::string& path);

  friend bool operator==(const ReplayBuffer& a, const ReplayBuffer& b) {
    return a.capacity_ == b.capacity_ && a.seen_ == b.seen_ && a.items_ == b.items_ && a.rng_ == b.rng_;
  }

 private:
  std::size_t capacity_;
  std::uint64_t seen_ = 0;
  std::vector<BufferItem> items_;
  Rng rng_;
  mutable std::uint64_t reads_ = 0;
};

void reservoir_insert(ReplayBuffer& buffer, BufferItem item);

/// z = forward(model, x, eval). Throws ShapeMismatch when the input does not
/// fit the model.
BufferItem attach_logits(BufferItem item, Model& model);
/// Batched form for several items at once.
void attach_logits(std::span<BufferItem> items, Model& model);

}  // namespace forgetlab
