#pragma once

// Quick self-contained verification battery behind `vistr selftest`. Each
// suite prints one line; the whole run takes seconds.

#include <iostream>

#include "vistr/gradcheck.hpp"
#include "vistr/losses.hpp"
#include "vistr/posenc.hpp"

namespace vistr {

namespace selftest_detail {

inline double brute_force_min(const CostMatrix& cm) {
  std::vector<int64_t> perm(cm.n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int64_t i = 0; i < cm.n; ++i) c += cm.at(i, perm[i]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline bool hungarian_suite(std::string& msg) {
  Rng rng(1001);
  for (int64_t n = 2; n <= 5; ++n)
    for (int trial = 0; trial < 100; ++trial) {
      CostMatrix cm;
      cm.n = n;
      cm.values.resize(n * n);
      for (auto& v : cm.values) v = rng.uniform(-4, 4);
      auto a = hungarian(cm);
      if (a.cost != brute_force_min(cm)) {
        msg = "assignment cost differs from exhaustive minimum at n=" + std::to_string(n);
        return false;
      }
    }
  return true;
}

inline bool gradient_suite(std::string& msg) {
  Rng rng(1002);
  using TD = Tensor<double>;
  struct Case {
    const char* name;
    std::function<TD(const TD&)> f;
    double lo, hi;
  };
  std::vector<Case> cases = {
      {"quadratic", [](const TD& t) { return sum(mul(t, t)); }, -1, 1},
      {"sigmoid", [](const TD& t) { return sum(sigmoid(t)); }, -2, 2},
      {"softmax",
       [](const TD& t) { return sum(mul(softmax(t, 1), TD::full({3, 4}, 0.3))) ; }, -1, 1},
      {"dice",
       [](const TD& t) {
         return dice_loss(sigmoid(t), TD::full({3, 4}, 1.0), 1.0);
       },
       -1, 1},
      {"focal",
       [](const TD& t) { return focal_loss(t, TD::full({3, 4}, 1.0), 0.25, 2.0); }, -1, 1},
  };
  for (auto& c : cases) {
    auto x = TD::uniform({3, 4}, rng, c.lo, c.hi);
    double err = gradient_check<double>(c.f, x, 1e-6);
    if (err >= 1e-6) {
      msg = std::string(c.name) + " gradient error " + std::to_string(err);
      return false;
    }
  }
  return true;
}

inline bool scalar_oracle_suite(std::string& msg) {
  auto close = [](double a, double b) { return std::abs(a - b) < 1e-12; };
  if (!close(generalized_iou({0, 0, 1, 1}, {2, 0, 3, 1}), -1.0 / 3.0)) {
    msg = "GIoU separated-box oracle";
    return false;
  }
  if (!close(generalized_iou({0, 0, 2, 2}, {1, 1, 3, 3}), -5.0 / 63.0)) {
    msg = "GIoU overlap oracle";
    return false;
  }
  using TD = Tensor<double>;
  auto p = TD::zeros({4, 4});
  auto g = TD::ones({4, 4});
  if (!close(dice_loss(p, g, 1.0).item(), 1.0 - 1.0 / 17.0)) {
    msg = "dice total-miss oracle";
    return false;
  }
  auto x1 = TD::from_data({1}, {0.0});
  auto g1 = TD::from_data({1}, {1.0});
  if (!close(focal_loss(x1, g1, 0.25, 2.0).item(), 0.25 * 0.25 * std::log(2.0))) {
    msg = "focal single-pixel oracle";
    return false;
  }
  return true;
}

// A deliberately broken GIoU (off-by-one in the enclosing-box term) must be
// rejected by the same oracle, which guards against a vacuous check.
inline bool mutant_suite(std::string& msg) {
  auto mutant_giou = [](const Box& a, const Box& b) {
    double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
    double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
    double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
    double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    double enclose = (std::max(a[2], b[2]) - std::min(a[0], b[0])) *
                     (std::max(a[3], b[3]) - std::min(a[1], b[1]));
    return inter / uni - (enclose - uni + 1.0) / enclose;  // injected off-by-one
  };
  bool mutant_detected = std::abs(mutant_giou({0, 0, 1, 1}, {2, 0, 3, 1}) + 1.0 / 3.0) > 1e-9;
  if (!mutant_detected) {
    msg = "oracle failed to reject the GIoU mutant";
    return false;
  }
  return true;
}

inline bool rle_suite(std::string& msg) {
  Rng rng(1003);
  for (int trial = 0; trial < 200; ++trial) {
    BinaryMask m = BinaryMask::empty(11, 19);
    for (auto& v : m.data) v = rng.uniform() < 0.35 ? 1 : 0;
    if (!(rle_decode(rle_encode(m), 11, 19) == m)) {
      msg = "RLE round trip failed";
      return false;
    }
  }
  return true;
}

inline bool posenc_suite(std::string& msg) {
  PositionalEncodingConfig cfg;
  cfg.d = 96;
  cfg.T = 3;
  cfg.H = 6;
  cfg.W = 10;
  auto pe = positional_encoding_sequence<double>(cfg);
  int64_t L = cfg.T * cfg.H * cfg.W;
  for (int64_t i = 0; i < L; ++i)
    for (int64_t j = i + 1; j < L; ++j) {
      bool distinct = false;
      for (int64_t c = 0; c < cfg.d && !distinct; ++c)
        distinct = std::abs(pe.values()[i * cfg.d + c] - pe.values()[j * cfg.d + c]) > 1e-6;
      if (!distinct) {
        msg = "positions " + std::to_string(i) + "," + std::to_string(j) + " collide";
        return false;
      }
    }
  return true;
}

}  // namespace selftest_detail

// Returns true when every suite passes; prints one line per suite.
inline bool run_selftest(std::ostream& os = std::cout) {
  using Suite = std::pair<const char*, bool (*)(std::string&)>;
  std::vector<Suite> suites = {
      {"hungarian-vs-brute-force", selftest_detail::hungarian_suite},
      {"gradient-checks", selftest_detail::gradient_suite},
      {"scalar-oracles", selftest_detail::scalar_oracle_suite},
      {"mutant-sanity", selftest_detail::mutant_suite},
      {"rle-round-trip", selftest_detail::rle_suite},
      {"posenc-distinctness", selftest_detail::posenc_suite},
  };
  bool all_ok = true;
  for (auto& [name, fn] : suites) {
    std::string msg;
    bool ok = fn(msg);
    os << (ok ? "PASS " : "FAIL ") << name;
    if (!ok) os << ": " << msg;
    os << "\n";
    all_ok = all_ok && ok;
  }
  os << (all_ok ? "selftest passed" : "selftest FAILED") << "\n";
  return all_ok;
}

}  // namespace vistr
