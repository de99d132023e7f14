#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <unordered_map>

namespace revcol {

enum class MemTag : std::uint8_t { activation, parameter };

// Global accounting of tensor storage. Two independent paths are kept:
// atomic byte counters updated on alloc/free/retag, and a registry of live
// storages that can be summed on demand. bench-mem reports the peak of the
// activation counter; parameters (including their gradients and optimizer
// moments) are excluded from that figure.
class MemoryTracker {
 public:
  static MemoryTracker& instance() {
    static MemoryTracker t;
    return t;
  }

  void on_alloc(const void* key, std::size_t bytes, MemTag tag) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      registry_[key] = Entry{bytes, tag};
    }
    counter(tag).fetch_add(bytes, std::memory_order_relaxed);
    if (tag == MemTag::activation) bump_peak();
  }

  void on_free(const void* key) {
    Entry e{};
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = registry_.find(key);
      if (it == registry_.end()) return;
      e = it->second;
      registry_.erase(it);
    }
    counter(e.tag).fetch_sub(e.bytes, std::memory_order_relaxed);
  }

  void retag(const void* key, MemTag tag) {
    std::size_t bytes = 0;
    MemTag old{};
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = registry_.find(key);
      if (it == registry_.end() || it->second.tag == tag) return;
      old = it->second.tag;
      bytes = it->second.bytes;
      it->second.tag = tag;
    }
    counter(old).fetch_sub(bytes, std::memory_order_relaxed);
    counter(tag).fetch_add(bytes, std::memory_order_relaxed);
    if (tag == MemTag::activation) bump_peak();
  }

  std::size_t live_activation_bytes() const { return act_.load(std::memory_order_relaxed); }
  std::size_t live_parameter_bytes() const { return param_.load(std::memory_order_relaxed); }
  std::size_t peak_activation_bytes() const { return peak_act_.load(std::memory_order_relaxed); }

  void reset_peak() { peak_act_.store(act_.load(std::memory_order_relaxed), std::memory_order_relaxed); }

  // Registry-side sum, used to cross-check the atomic counters.
  std::size_t registry_bytes(MemTag tag) const {
    std::lock_guard<std::mutex> lock(mu_);
    std::size_t total = 0;
    for (const auto& [key, e] : registry_)
      if (e.tag == tag) total += e.bytes;
    return total;
  }

 private:
  struct Entry {
    std::size_t bytes = 0;
    MemTag tag = MemTag::activation;
  };

  std::atomic<std::size_t>& counter(MemTag tag) { return tag == MemTag::activation ? act_ : param_; }

  void bump_peak() {
    std::size_t cur = act_.load(std::memory_order_relaxed);
    std::size_t prev = peak_act_.load(std::memory_order_relaxed);
    while (cur > prev && !peak_act_.compare_exchange_weak(prev, cur, std::memory_order_relaxed)) {
    }
  }

  mutable std::mutex mu_;
  std::unordered_map<const void*, Entry> registry_;
  std::atomic<std::size_t> act_{0};
  std::atomic<std::size_t> param_{0};
  std::atomic<std::size_t> peak_act_{0};
};

}  // namespace revcol
