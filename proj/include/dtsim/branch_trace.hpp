#pragma once

#include <cstdint>
#include <vector>

namespace dtsim {

/// Running hash of every discrete decision taken during a forward run
/// (validity masks, sort orders, branch selections, sampled argmaxes).
/// Two runs with equal hashes followed the same control path, which is
/// what finite-difference probes need to certify a kink-free neighbourhood.
struct BranchTrace {
  std::uint64_t h = 0xcbf29ce484222325ULL;

  void note_bit(bool b) {
    h = (h ^ (b ? 0x9eULL : 0x7fULL)) * 0x100000001b3ULL;
  }
  void note_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h = (h ^ (v & 0xffULL)) * 0x100000001b3ULL;
      v >>= 8;
    }
  }
  void note_bits(const std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) note_bit(a[i] <= b[i]);
  }
  void note_pattern(const std::vector<double>& zero_one) {
    for (double v : zero_one) note_bit(v != 0.0);
  }
  void note_indices(const std::vector<int>& idx) {
    for (int i : idx) note_u64(static_cast<std::uint64_t>(i));
  }
};

}  // namespace dtsim
