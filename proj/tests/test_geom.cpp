#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "bica/geom.hpp"
#include "bica/rng.hpp"

using namespace bica;

namespace {

std::vector<double> rand_cloud(int n, Rng& rng, double span = 2.0) {
  std::vector<double> xyz(static_cast<size_t>(n) * 3);
  for (auto& v : xyz) v = rng.uniform(-span, span);
  return xyz;
}

// O(n^2) greedy max-min reference, recomputing distances from scratch.
std::vector<int> fps_oracle(const std::vector<double>& xyz, int n, int k, int start) {
  std::vector<int> picked{start};
  while (static_cast<int>(picked.size()) < k) {
    int best = -1;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      double near = std::numeric_limits<double>::infinity();
      for (int p : picked) {
        double d = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double diff = xyz[static_cast<size_t>(i) * 3 + a] - xyz[static_cast<size_t>(p) * 3 + a];
          d += diff * diff;
        }
        near = std::min(near, d);
      }
      if (near > far) {
        far = near;
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

Box mk_box(double cx, double cy, double cz, double sx, double sy, double sz) {
  return Box{{cx, cy, cz}, {sx, sy, sz}};
}

}  // namespace

TEST_CASE("farthest point sampling") {
  SECTION("collinear tie resolves to the lowest index") {
    std::vector<double> xyz;
    for (int i = 0; i < 10; ++i) {
      xyz.push_back(static_cast<double>(i));
      xyz.push_back(0.0);
      xyz.push_back(0.0);
    }
    REQUIRE(fps(xyz, 10, 3, 0) == std::vector<int>{0, 9, 4});
  }
  SECTION("k equal to n returns every index in selection order") {
    Rng rng(3);
    auto xyz = rand_cloud(12, rng);
    auto got = fps(xyz, 12, 12, 0);
    auto sorted = got;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 12; ++i) REQUIRE(sorted[static_cast<size_t>(i)] == i);
    REQUIRE(got == fps_oracle(xyz, 12, 12, 0));
  }
  SECTION("matches the exhaustive greedy oracle on random clouds") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 + rng.next_int(63);
      const int k = 1 + rng.next_int(n);
      auto xyz = rand_cloud(n, rng);
      REQUIRE(fps(xyz, n, k, 0) == fps_oracle(xyz, n, k, 0));
    }
  }
  SECTION("rejects bad arguments") {
    std::vector<double> xyz{0, 0, 0};
    REQUIRE_THROWS_AS(fps(xyz, 1, 2, 0), validation_error);
    REQUIRE_THROWS_AS(fps(xyz, 1, 1, 5), validation_error);
  }
}

TEST_CASE("ball query") {
  SECTION("far centers fall back to the nearest point and get flagged") {
    std::vector<double> xyz{0, 0, 0, 0.1, 0, 0};
    std::vector<double> ctr{5, 5, 5};
    auto r = ball_query(xyz, 2, ctr, 1, 0.5, 4);
    REQUIRE(r.empty[0] == 1);
    for (int s = 0; s < 4; ++s) REQUIRE(r.idx[static_cast<size_t>(s)] == 1);  // nearest to (5,5,5)
  }
  SECTION("exact fill is unpadded, short fill repeats the first hit") {
    std::vector<double> xyz{0, 0, 0, 0.1, 0, 0, 0.2, 0, 0, 9, 9, 9};
    std::vector<double> ctr{0, 0, 0};
    auto exact = ball_query(xyz, 4, ctr, 1, 0.25, 3);
    REQUIRE(exact.empty[0] == 0);
    REQUIRE(exact.idx == std::vector<int>{0, 1, 2});
    auto padded = ball_query(xyz, 4, ctr, 1, 0.15, 4);
    REQUIRE(padded.idx == std::vector<int>{0, 1, 0, 0});
  }
  SECTION("agrees with a brute-force distance filter") {
    Rng rng(5);
    const int n = 60, m = 7, ns = 8;
    const double radius = 1.1;
    auto xyz = rand_cloud(n, rng);
    auto ctr = rand_cloud(m, rng, 1.5);
    auto r = ball_query(xyz, n, ctr, m, radius, ns);
    for (int c = 0; c < m; ++c) {
      std::vector<int> want;
      for (int i = 0; i < n && static_cast<int>(want.size()) < ns; ++i) {
        double d = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double diff = xyz[static_cast<size_t>(i) * 3 + a] - ctr[static_cast<size_t>(c) * 3 + a];
          d += diff * diff;
        }
        if (d <= radius * radius) want.push_back(i);
      }
      if (want.empty()) {
        REQUIRE(r.empty[static_cast<size_t>(c)] == 1);
        continue;
      }
      while (static_cast<int>(want.size()) < ns) want.push_back(want[0]);
      for (int s = 0; s < ns; ++s) REQUIRE(r.idx[static_cast<size_t>(c) * ns + s] == want[static_cast<size_t>(s)]);
      // in-radius invariant for non-padded entries
      for (int s = 0; s < ns; ++s) {
        const int i = r.idx[static_cast<size_t>(c) * ns + s];
        double d = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double diff = xyz[static_cast<size_t>(i) * 3 + a] - ctr[static_cast<size_t>(c) * 3 + a];
          d += diff * diff;
        }
        REQUIRE(std::sqrt(d) <= radius + 1e-6);
      }
    }
  }
}

TEST_CASE("knn") {
  SECTION("k=1 on identical sets returns self indices") {
    Rng rng(6);
    auto xyz = rand_cloud(9, rng);
    auto idx = knn(xyz, 9, xyz, 9, 1);
    for (int i = 0; i < 9; ++i) REQUIRE(idx[static_cast<size_t>(i)] == i);
  }
  SECTION("matches a full-sort oracle with index tie-breaks") {
    Rng rng(7);
    const int n = 50, m = 6, k = 16;
    auto xyz = rand_cloud(n, rng);
    auto q = rand_cloud(m, rng);
    auto got = knn(xyz, n, q, m, k);
    for (int qi = 0; qi < m; ++qi) {
      std::vector<std::pair<double, int>> all;
      for (int i = 0; i < n; ++i) {
        double d = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double diff = xyz[static_cast<size_t>(i) * 3 + a] - q[static_cast<size_t>(qi) * 3 + a];
          d += diff * diff;
        }
        all.emplace_back(d, i);
      }
      std::sort(all.begin(), all.end());
      for (int s = 0; s < k; ++s) REQUIRE(got[static_cast<size_t>(qi) * k + s] == all[static_cast<size_t>(s)].second);
    }
  }
  SECTION("rejects k beyond the cloud size") {
    std::vector<double> xyz{0, 0, 0};
    REQUIRE_THROWS_AS(knn(xyz, 1, xyz, 1, 2), validation_error);
  }
}

TEST_CASE("set abstraction") {
  auto identity_mlp = [](const Tensor<double>& x) { return x; };

  SECTION("single global group pools the elementwise max") {
    Rng rng(8);
    const int n = 10;
    auto xyz = rand_cloud(n, rng, 0.5);
    auto pos = Tensor<double>::from({n, 3}, xyz);
    std::vector<double> fv(static_cast<size_t>(n) * 2);
    Rng r2(9);
    for (auto& v : fv) v = r2.uniform(-1.0, 1.0);
    auto feats = Tensor<double>::from({n, 2}, fv);
    auto res = set_abstraction<double>(pos, feats, 1, 10.0, n, identity_mlp, nullptr);
    REQUIRE(res.centers.dim(0) == 1);
    REQUIRE(res.features.shape() == std::vector<int>{1, 5});
    // column-wise max over [rel xyz ; feats]
    for (int c = 0; c < 5; ++c) {
      double want = -1e30;
      for (int i = 0; i < n; ++i) {
        double v;
        if (c < 3)
          v = xyz[static_cast<size_t>(i) * 3 + c] - res.centers.val()[static_cast<size_t>(c)];
        else
          v = fv[static_cast<size_t>(i) * 2 + (c - 3)];
        want = std::max(want, v);
      }
      REQUIRE(res.features.val()[static_cast<size_t>(c)] == Catch::Approx(want).margin(1e-12));
    }
  }
  SECTION("vanishing radius reduces to per-point identity features") {
    Rng rng(10);
    const int n = 6;
    auto xyz = rand_cloud(n, rng);
    auto pos = Tensor<double>::from({n, 3}, xyz);
    auto feats = Tensor<double>::from({n, 1}, {1., 2., 3., 4., 5., 6.});
    auto res = set_abstraction<double>(pos, feats, n, 1e-9, 2, identity_mlp, nullptr);
    REQUIRE(res.center_idx.size() == static_cast<size_t>(n));
    for (int g = 0; g < n; ++g) {
      // rel xyz of the center itself is 0; feature is its own
      for (int a = 0; a < 3; ++a)
        REQUIRE(res.features.at(g, a) == Catch::Approx(0.0).margin(1e-12));
      REQUIRE(res.features.at(g, 3) ==
              feats.val()[static_cast<size_t>(res.center_idx[static_cast<size_t>(g)])]);
    }
  }
  SECTION("instance-scale configuration yields the requested center count") {
    Rng rng(11);
    const int n = 1024;
    auto pos = Tensor<double>::from({n, 3}, rand_cloud(n, rng, 1.0));
    auto res = set_abstraction<double>(pos, {}, 256, 0.3, 16, identity_mlp, nullptr);
    REQUIRE(res.centers.shape() == std::vector<int>{256, 3});
    REQUIRE(res.features.dim(0) == 256);
  }
  SECTION("gradients flow through positions, features and the mlp under a pinned cache") {
    Rng rng(12);
    const int n = 12;
    auto pos = Tensor<double>::from({n, 3}, rand_cloud(n, rng, 0.6), true);
    std::vector<double> fv(static_cast<size_t>(n) * 2);
    for (auto& v : fv) v = rng.uniform(-1.0, 1.0);
    auto feats = Tensor<double>::from({n, 2}, fv, true);
    auto w = Tensor<double>::from({5, 4}, [&] {
      std::vector<double> v(20);
      for (auto& x : v) x = rng.uniform(-0.5, 0.5);
      return v;
    }(), true);

    DiscreteCache cache;
    auto forward = [&]() {
      auto mlp = [&](const Tensor<double>& x) { return matmul(x, w); };
      auto res = set_abstraction<double>(pos, feats, 4, 0.8, 3, mlp, &cache);
      Rng r3(77);
      std::vector<double> rw(res.features.size());
      for (auto& x : rw) x = r3.uniform(-1.0, 1.0);
      return sum(mul(res.features, Tensor<double>::from(res.features.shape(), rw)));
    };
    auto loss = forward();
    loss.backward();
    std::vector<std::pair<Tensor<double>, std::string>> leaves{{pos, "pos"}, {feats, "feats"}, {w, "w"}};
    cache.start_replay();
    Rng prng(13);
    for (int t = 0; t < 30; ++t) {
      auto& leaf = leaves[static_cast<size_t>(prng.next_int(3))].first;
      const int ci = prng.next_int(static_cast<int>(leaf.size()));
      const double ga = leaf.grad().empty() ? 0.0 : leaf.grad()[static_cast<size_t>(ci)];
      const double orig = leaf.val()[static_cast<size_t>(ci)];
      const double h = 1e-5;
      NoGradGuard ng;
      cache.start_replay();
      leaf.val()[static_cast<size_t>(ci)] = orig + h;
      const double lp = forward().item();
      cache.start_replay();
      leaf.val()[static_cast<size_t>(ci)] = orig - h;
      const double lm = forward().item();
      leaf.val()[static_cast<size_t>(ci)] = orig;
      const double gf = (lp - lm) / (2 * h);
      REQUIRE(std::abs(ga - gf) / std::max(1e-6, std::abs(ga) + std::abs(gf)) < 1e-3);
    }
  }
}

TEST_CASE("fourier features") {
  SECTION("zero frequency matrix gives zeros then ones") {
    auto xyz = Tensor<double>::from({2, 3}, {1, 2, 3, -1, 0, 4});
    auto B = Tensor<double>::zeros({3, 2});
    auto pe = fourier_pe(xyz, B);
    REQUIRE(pe.shape() == std::vector<int>{2, 4});
    for (int i = 0; i < 2; ++i) {
      REQUIRE(pe.at(i, 0) == 0.0);
      REQUIRE(pe.at(i, 1) == 0.0);
      REQUIRE(pe.at(i, 2) == 1.0);
      REQUIRE(pe.at(i, 3) == 1.0);
    }
  }
  SECTION("single frequency closed form and translation sensitivity") {
    auto xyz = Tensor<double>::from({1, 3}, {0.25, 0.0, 0.0});
    auto B = Tensor<double>::from({3, 1}, {1.0, 0.0, 0.0});
    auto pe = fourier_pe(xyz, B);
    REQUIRE(pe.at(0, 0) == Catch::Approx(std::sin(2.0 * M_PI * 0.25)).margin(1e-12));
    REQUIRE(pe.at(0, 1) == Catch::Approx(std::cos(2.0 * M_PI * 0.25)).margin(1e-12));
    auto shifted = fourier_pe(add_const(xyz, 0.1), B);
    REQUIRE(std::abs(shifted.at(0, 0) - pe.at(0, 0)) > 1e-3);
  }
}

TEST_CASE("sinusoid positional encoding") {
  auto pe0 = sinusoid_pe<double>(0, 8);
  for (int i = 0; i < 8; i += 2) {
    REQUIRE(pe0[static_cast<size_t>(i)] == 0.0);
    REQUIRE(pe0[static_cast<size_t>(i) + 1] == 1.0);
  }
  auto pe1 = sinusoid_pe<double>(1, 4);
  REQUIRE(pe1[0] == Catch::Approx(std::sin(1.0)).margin(1e-12));
  REQUIRE(pe1[1] == Catch::Approx(std::cos(1.0)).margin(1e-12));
  REQUIRE(pe1[2] == Catch::Approx(std::sin(0.01)).margin(1e-12));
  REQUIRE(pe1[3] == Catch::Approx(std::cos(0.01)).margin(1e-12));
  REQUIRE(sinusoid_pe<double>(5, 8)[0] == Catch::Approx(std::sin(5.0)).margin(1e-12));
}

TEST_CASE("box overlap measures") {
  const Box unit = mk_box(0, 0, 0, 1, 1, 1);
  SECTION("identical, disjoint, half-overlap") {
    REQUIRE(box_iou(unit, unit) == Catch::Approx(1.0));
    REQUIRE(box_giou(unit, unit) == Catch::Approx(1.0));
    const Box far = mk_box(10, 0, 0, 1, 1, 1);
    REQUIRE(box_iou(unit, far) == 0.0);
    REQUIRE(box_giou(unit, far) == Catch::Approx(-9.0 / 11.0).margin(1e-6));
    const Box half = mk_box(0.5, 0, 0, 1, 1, 1);
    REQUIRE(box_iou(unit, half) == Catch::Approx(1.0 / 3.0).margin(1e-6));
    REQUIRE(box_giou(unit, half) == Catch::Approx(1.0 / 3.0).margin(1e-6));
  }
  SECTION("symmetry and giou upper bound") {
    Rng rng(14);
    for (int t = 0; t < 200; ++t) {
      auto rb = [&] {
        return mk_box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2),
                      rng.uniform(0.2f, 2.0f), rng.uniform(0.2f, 2.0f), rng.uniform(0.2f, 2.0f));
      };
      const Box a = rb(), b = rb();
      REQUIRE(box_iou(a, b) == Catch::Approx(box_iou(b, a)).margin(1e-12));
      REQUIRE(box_giou(a, b) <= box_iou(a, b) + 1e-12);
      REQUIRE(box_giou(a, b) > -1.0);
      REQUIRE(box_iou(a, b) >= 0.0);
      REQUIRE(box_iou(a, b) <= 1.0);
    }
  }
}

TEST_CASE("nms") {
  SECTION("duplicate suppression keeps the higher score") {
    std::vector<Box> boxes{mk_box(0, 0, 0, 1, 1, 1), mk_box(0, 0, 0, 1, 1, 1)};
    REQUIRE(nms_3d(boxes, {0.9, 0.8}, 0.5) == std::vector<int>{0});
    REQUIRE(nms_3d(boxes, {0.8, 0.9}, 0.5) == std::vector<int>{1});
  }
  SECTION("disjoint boxes all survive") {
    std::vector<Box> boxes{mk_box(0, 0, 0, 1, 1, 1), mk_box(5, 0, 0, 1, 1, 1),
                           mk_box(0, 5, 0, 1, 1, 1)};
    REQUIRE(nms_3d(boxes, {0.3, 0.2, 0.1}, 0.5).size() == 3);
  }
  SECTION("suppression chain keeps the two ends") {
    // A overlaps B, B overlaps C, A and C disjoint; scores descending
    std::vector<Box> boxes{mk_box(0, 0, 0, 1, 1, 1), mk_box(0.25, 0, 0, 1, 1, 1),
                           mk_box(0.5, 0, 0, 1, 1, 1)};
    REQUIRE(box_iou(boxes[0], boxes[1]) > 0.5);
    REQUIRE(box_iou(boxes[1], boxes[2]) > 0.5);
    REQUIRE(box_iou(boxes[0], boxes[2]) < 0.5);
    REQUIRE(nms_3d(boxes, {0.9, 0.8, 0.7}, 0.5) == std::vector<int>{0, 2});
  }
  SECTION("kept set is mutually below the threshold with ordered scores") {
    Rng rng(15);
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 40; ++i) {
      boxes.push_back(mk_box(rng.uniform(-2, 2), rng.uniform(-2, 2), 0, rng.uniform(0.5f, 1.5f),
                             rng.uniform(0.5f, 1.5f), 1));
      scores.push_back(rng.next_double());
    }
    auto keep = nms_3d(boxes, scores, 0.3);
    for (size_t i = 1; i < keep.size(); ++i)
      REQUIRE(scores[static_cast<size_t>(keep[i - 1])] >= scores[static_cast<size_t>(keep[i])]);
    for (size_t i = 0; i < keep.size(); ++i)
      for (size_t j = i + 1; j < keep.size(); ++j)
        REQUIRE(box_iou(boxes[static_cast<size_t>(keep[i])], boxes[static_cast<size_t>(keep[j])]) <= 0.3 + 1e-12);
  }
}

TEST_CASE("differentiable giou rows agree with the scalar kernel") {
  Rng rng(16);
  const int m = 8;
  std::vector<double> pc, ps, gc, gs;
  for (int i = 0; i < m; ++i) {
    for (int a = 0; a < 3; ++a) {
      pc.push_back(rng.uniform(-1, 1));
      ps.push_back(rng.uniform(0.4f, 1.5f));
      gc.push_back(rng.uniform(-1, 1));
      gs.push_back(rng.uniform(0.4f, 1.5f));
    }
  }
  auto tpc = Tensor<double>::from({m, 3}, pc, true);
  auto tps = Tensor<double>::from({m, 3}, ps, true);
  auto tgc = Tensor<double>::from({m, 3}, gc);
  auto tgs = Tensor<double>::from({m, 3}, gs);
  auto rows = giou_rows(tpc, tps, tgc, tgs);
  for (int i = 0; i < m; ++i) {
    Box a{{pc[static_cast<size_t>(i) * 3], pc[static_cast<size_t>(i) * 3 + 1], pc[static_cast<size_t>(i) * 3 + 2]},
          {ps[static_cast<size_t>(i) * 3], ps[static_cast<size_t>(i) * 3 + 1], ps[static_cast<size_t>(i) * 3 + 2]}};
    Box b{{gc[static_cast<size_t>(i) * 3], gc[static_cast<size_t>(i) * 3 + 1], gc[static_cast<size_t>(i) * 3 + 2]},
          {gs[static_cast<size_t>(i) * 3], gs[static_cast<size_t>(i) * 3 + 1], gs[static_cast<size_t>(i) * 3 + 2]}};
    REQUIRE(rows.val()[static_cast<size_t>(i)] == Catch::Approx(box_giou(a, b)).margin(1e-9));
  }

  // gradient sanity: increasing overlap raises giou
  auto loss = sum(rows);
  loss.backward();
  bool any_nonzero = false;
  for (double g : tpc.grad()) any_nonzero = any_nonzero || std::abs(g) > 1e-9;
  REQUIRE(any_nonzero);
  const double h = 1e-6;
  Rng prng(17);
  for (int t = 0; t < 20; ++t) {
    auto& leaf = t % 2 == 0 ? tpc : tps;
    const int ci = prng.next_int(3 * m);
    const double orig = leaf.val()[static_cast<size_t>(ci)];
    NoGradGuard ng;
    leaf.val()[static_cast<size_t>(ci)] = orig + h;
    const double lp = sum(giou_rows(tpc, tps, tgc, tgs)).item();
    leaf.val()[static_cast<size_t>(ci)] = orig - h;
    const double lm = sum(giou_rows(tpc, tps, tgc, tgs)).item();
    leaf.val()[static_cast<size_t>(ci)] = orig;
    const double gf = (lp - lm) / (2 * h);
    const double ga = leaf.grad()[static_cast<size_t>(ci)];
    REQUIRE(std::abs(ga - gf) / std::max(1e-6, std::abs(ga) + std::abs(gf)) < 1e-3);
  }
}
