#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include <boost/random/normal_distribution.hpp>

namespace mfip {

// Philox4x32-10 (Salmon et al., SC'11). Pure function of (key, counter), so a
// random draw is addressed by its logical coordinates rather than by the order
// in which threads happen to consume a stream.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  std::uint32_t c0 = ctr[0], c1 = ctr[1], c2 = ctr[2], c3 = ctr[3];
  std::uint32_t k0 = key[0], k1 = key[1];
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c0;
    const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c2;
    const auto n0 = static_cast<std::uint32_t>(p1 >> 32) ^ c1 ^ k0;
    const auto n2 = static_cast<std::uint32_t>(p0 >> 32) ^ c3 ^ k1;
    c1 = static_cast<std::uint32_t>(p1);
    c3 = static_cast<std::uint32_t>(p0);
    c0 = n0;
    c2 = n2;
    k0 += 0x9E3779B9u;
    k1 += 0xBB67AE85u;
  }
  return {c0, c1, c2, c3};
}

// Stream tags keep draws for different purposes disjoint.
enum class RngStream : std::uint32_t {
  kStepNoise = 1,
  kInitial = 2,
  kSubsets = 3,
  kExperiment = 4,
  kTest = 0xFFFF,
};

// Counter-based generator keyed by (seed, stream, step, particle). Successive
// calls advance an internal block index, so a fixed (seed, stream, step,
// particle) always yields the same sequence.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, RngStream stream, std::uint64_t step, std::uint64_t particle)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        step_(step),
        particle_(particle),
        stream_(static_cast<std::uint32_t>(stream)) {}

  // UniformRandomBitGenerator interface: successive 32-bit Philox words.
  using result_type = std::uint32_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return 0xFFFFFFFFu; }
  result_type operator()() {
    if (word_ >= block_.size()) refill();
    return block_[word_++];
  }

  // Uniform on the open interval (0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = (*this)();
    const std::uint64_t lo = (*this)();
    const std::uint64_t bits = ((hi << 32) | lo) >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  // Standard normal (ziggurat).
  double normal() { return boost::random::normal_distribution<double>()(*this); }

 private:
  void refill() {
    block_ = philox4x32({static_cast<std::uint32_t>(block_index_),
                         static_cast<std::uint32_t>(particle_) ^ static_cast<std::uint32_t>(block_index_ >> 32),
                         static_cast<std::uint32_t>(step_) ^ (static_cast<std::uint32_t>(particle_ >> 32) << 20),
                         stream_ ^ (static_cast<std::uint32_t>(step_ >> 32) << 16)},
                        key_);
    ++block_index_;
    word_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t step_;
  std::uint64_t particle_;
  std::uint32_t stream_;
  std::uint64_t block_index_ = 0;
  std::array<std::uint32_t, 4> block_{};
  std::size_t word_ = 4;
};

}  // namespace mfip
