#pragma once

#include <cstdint>

namespace latfuse {
namespace flops {

// Thread-local FLOP counter the dense kernels report into. Disabled (null)
// unless a CounterScope is alive on the current thread, so timing runs pay a
// single predictable branch per kernel call.
//
// Counting convention: matmul 2*M*K*P, elementwise ops 1 per element,
// softmax 5 per element, row normalization 8 per element, bilinear sampling
// 7 per sampled channel. The constants are coarse; scaling tests only rely on
// the counts being a fixed function of the operand shapes.

inline std::uint64_t*& counter_slot() {
  thread_local std::uint64_t* slot = nullptr;
  return slot;
}

inline void add(std::uint64_t n) {
  if (std::uint64_t* c = counter_slot()) *c += n;
}

class CounterScope {
 public:
  CounterScope() : previous_(counter_slot()) { counter_slot() = &count_; }
  ~CounterScope() { counter_slot() = previous_; }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

  std::uint64_t count() const { return count_; }
  void reset() { count_ = 0; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

}  // namespace flops
}  // namespace latfuse
