#pragma once

#include <algorithm>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <vector>

#include "dmac/rng.hpp"

namespace dmac {

// Transition store holding whole episodes, oldest dropped first. The successor
// of a record is the next record of the same episode, so next states are not
// stored twice.
template <typename Record>
class EpisodicBuffer {
 public:
  struct Ref {
    const Record* step;
    const Record* next;  // null on the last record of an episode
  };

  explicit EpisodicBuffer(std::size_t capacity) : capacity_(capacity) {}

  void add_episode(std::vector<Record> records) {
    if (records.empty()) return;
    size_ += records.size();
    episodes_.push_back(std::move(records));
    while (size_ > capacity_ && episodes_.size() > 1) {
      size_ -= episodes_.front().size();
      episodes_.pop_front();
    }
    ends_.resize(episodes_.size());
    std::size_t acc = 0;
    for (std::size_t e = 0; e < episodes_.size(); ++e) ends_[e] = acc += episodes_[e].size();
  }

  std::size_t size() const { return size_; }
  std::size_t episodes() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }

  Ref at(std::size_t index) const {
    if (index >= size_) throw std::out_of_range("replay index out of range");
    const auto e = static_cast<std::size_t>(std::upper_bound(ends_.begin(), ends_.end(), index) - ends_.begin());
    const std::size_t t = index - (e == 0 ? 0 : ends_[e - 1]);
    const auto& ep = episodes_[e];
    return {&ep[t], t + 1 < ep.size() ? &ep[t + 1] : nullptr};
  }

  // Uniform over stored transitions, with replacement.
  std::vector<Ref> sample(std::size_t count, Rng& rng) const {
    if (size_ == 0) throw std::logic_error("sampling from an empty replay buffer");
    std::vector<Ref> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) out.push_back(at(rng.index(size_)));
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t size_ = 0;
  std::deque<std::vector<Record>> episodes_;
  std::vector<std::size_t> ends_;
};

}  // namespace dmac
