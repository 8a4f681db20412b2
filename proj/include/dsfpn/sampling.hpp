#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace dsfpn {

struct SampledIndices {
  std::vector<std::size_t> foreground;
  std::vector<std::size_t> background;
};

// Up to floor(fg_fraction·batch) foregrounds, the rest of the batch filled with backgrounds.
// Each subset is drawn uniformly without replacement and returned in ascending order.
inline SampledIndices sample_balanced(std::vector<std::size_t> fg, std::vector<std::size_t> bg, std::size_t batch,
                                      double fg_fraction, std::mt19937_64& rng) {
  const auto fg_quota = static_cast<std::size_t>(std::floor(fg_fraction * static_cast<double>(batch) + 1e-9));
  const std::size_t n_fg = std::min(fg.size(), fg_quota);
  const std::size_t n_bg = std::min(bg.size(), batch - n_fg);
  auto pick = [&](std::vector<std::size_t>& pool, std::size_t n) {
    if (n < pool.size()) {
      std::shuffle(pool.begin(), pool.end(), rng);
      pool.resize(n);
    }
    std::sort(pool.begin(), pool.end());
    return pool;
  };
  SampledIndices out;
  out.foreground = pick(fg, n_fg);
  out.background = pick(bg, n_bg);
  return out;
}

}  // namespace dsfpn
