#include "forgetlab/replay.hpp"

#include <numeric>

#include <fmt/format.h>

#include "forgetlab/binary_io.hpp"
#include "forgetlab/error.hpp"

namespace forgetlab {
namespace {

constexpr std::string_view buffer_magic{"FLBUF\0\0\0", 8};
constexpr std::uint32_t buffer_version = 1;

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  items_.reserve(capacity);
}

std::optional<std::size_t> ReplayBuffer::reserve_slot() {
  std::optional<std::size_t> slot;
  if (seen_ < capacity_) {
    slot = static_cast<std::size_t>(seen_);
  } else if (capacity_ > 0) {
    const auto k = static_cast<std::uint64_t>(rng_.uniform_int(0, static_cast<std::int64_t>(seen_)));
    if (k < capacity_) slot = static_cast<std::size_t>(k);
  }
  ++seen_;
  return slot;
}

void ReplayBuffer::store(std::size_t slot, BufferItem item) {
  if (slot == items_.size() && slot < capacity_) {
    items_.push_back(std::move(item));
  } else if (slot < items_.size()) {
    items_[slot] = std::move(item);
  } else {
    fail(ErrorCode::shape_mismatch, fmt::format("buffer slot {} out of range", slot));
  }
}

bool ReplayBuffer::insert(BufferItem item) {
  const auto slot = reserve_slot();
  if (!slot) return false;
  store(*slot, std::move(item));
  return true;
}

std::vector<BufferItem> ReplayBuffer::sample_batch(std::size_t batch_size, Rng& rng) const {
  if (items_.empty()) fail(ErrorCode::empty_buffer, "sample_batch on an empty buffer");
  std::vector<std::size_t> idx(items_.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (batch_size < items_.size()) {
    // Partial Fisher-Yates: the first batch_size positions are a uniform draw.
    for (std::size_t i = 0; i < batch_size; ++i) {
      const auto j = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(idx.size()) - 1));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(batch_size);
  }
  return gather(idx);
}

std::vector<BufferItem> ReplayBuffer::gather(std::span<const std::size_t> indices) const {
  ++reads_;
  std::vector<BufferItem> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(items_.at(i));
  return out;
}

std::string ReplayBuffer::encode() const {
  ByteWriter w;
  w.raw(buffer_magic);
  w.u32(buffer_version);
  w.u64(capacity_);
  w.u64(seen_);
  for (auto word : rng_.state()) w.u64(word);
  w.u64(items_.size());
  for (const auto& item : items_) {
    w.f64s(item.input);
    w.i32(item.label);
    w.u64(item.insertion_step);
    w.u32(item.logits ? 1U : 0U);
    if (item.logits) w.f64s(*item.logits);
  }
  return w.bytes();
}

ReplayBuffer ReplayBuffer::decode(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < buffer_magic.size() || r.raw(buffer_magic.size()) != buffer_magic) {
    fail(ErrorCode::bad_magic, "not a buffer dump");
  }
  if (const auto v = r.u32(); v != buffer_version) fail(ErrorCode::bad_format, fmt::format("buffer version {}", v));
  ReplayBuffer buf(static_cast<std::size_t>(r.u64()));
  buf.seen_ = r.u64();
  std::array<std::uint64_t, 4> state{};
  for (auto& word : state) word = r.u64();
  buf.rng_ = Rng::from_state(state);
  const auto n = r.u64();
  if (n > buf.capacity_ || n != std::min<std::uint64_t>(buf.seen_, buf.capacity_)) {
    fail(ErrorCode::bad_format, "buffer item count violates the size law");
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    BufferItem item;
    item.input = r.f64s();
    item.label = r.i32();
    item.insertion_step = r.u64();
    if (r.u32() != 0) item.logits = r.f64s();
    buf.items_.push_back(std::move(item));
  }
  if (!r.done()) fail(ErrorCode::bad_format, "trailing bytes after buffer dump");
  return buf;
}

void ReplayBuffer::save(const std::string& path) const { write_file(path, encode()); }

ReplayBuffer ReplayBuffer::load(const std::string& path) { return decode(read_file(path)); }

void reservoir_insert(ReplayBuffer& buffer, BufferItem item) { buffer.insert(std::move(item)); }

BufferItem attach_logits(BufferItem item, Model& model) {
  attach_logits(std::span<BufferItem>(&item, 1), model);
  return item;
}

void attach_logits(std::span<BufferItem> items, Model& model) {
  if (items.empty()) return;
  const std::size_t d = shape_numel(model.spec().input_shape);
  std::vector<double> inputs;
  inputs.reserve(items.size() * d);
  for (const auto& item : items) {
    if (item.input.size() != d) {
      fail(ErrorCode::shape_mismatch, fmt::format("buffer item has {} features, model expects {}", item.input.size(), d));
    }
    inputs.insert(inputs.end(), item.input.begin(), item.input.end());
  }
  const Tensor logits = model.forward(inputs, items.size(), Mode::eval);
  const std::size_t C = logits.dim(1);
  if (C != model.spec().num_classes) fail(ErrorCode::shape_mismatch, "model output width differs from num_classes");
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i].logits.emplace(logits.data().begin() + static_cast<std::ptrdiff_t>(i * C),
                            logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * C));
  }
}

}  // namespace forgetlab
