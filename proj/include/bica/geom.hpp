#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "bica/ops.hpp"

namespace bica {

// Records every data-dependent index selection (FPS picks, ball-query groups,
// pooling argmaxes live in the graph already, Hungarian assignments) so a
// finite-difference probe can replay the exact same discrete structure while
// only the continuous values move.
struct DiscreteCache {
  std::vector<std::vector<int>> records;
  size_t cursor = 0;
  bool replay = false;

  void start_replay() {
    replay = true;
    cursor = 0;
  }

  std::vector<int> pin(std::vector<int> fresh) {
    if (replay) {
      if (cursor >= records.size()) throw validation_error("discrete cache: replay exhausted");
      return records[cursor++];
    }
    records.push_back(fresh);
    return fresh;
  }
};

inline std::vector<int> pin(DiscreteCache* c, std::vector<int> fresh) {
  return c ? c->pin(std::move(fresh)) : fresh;
}

// ---------------------------------------------------------------------------
// index-space point utilities (value arithmetic in double for stable picks)

// Farthest point sampling over n points (flat xyz, row-major [n x 3]).
// Deterministic: fixed start index, distance ties resolved to the lowest index.
template <class T>
std::vector<int> fps(const std::vector<T>& xyz, int n, int k, int start = 0) {
  if (k <= 0 || k > n) throw validation_error("fps: need 0 < k <= n");
  if (start < 0 || start >= n) throw validation_error("fps: bad start index");
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(k));
  std::vector<double> best(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  int cur = start;
  for (int it = 0; it < k; ++it) {
    picked.push_back(cur);
    const double cx = xyz[static_cast<size_t>(cur) * 3];
    const double cy = xyz[static_cast<size_t>(cur) * 3 + 1];
    const double cz = xyz[static_cast<size_t>(cur) * 3 + 2];
    int nxt = -1;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      const double dx = xyz[static_cast<size_t>(i) * 3] - cx;
      const double dy = xyz[static_cast<size_t>(i) * 3 + 1] - cy;
      const double dz = xyz[static_cast<size_t>(i) * 3 + 2] - cz;
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best[static_cast<size_t>(i)]) best[static_cast<size_t>(i)] = d;
      if (best[static_cast<size_t>(i)] > far) {
        far = best[static_cast<size_t>(i)];
        nxt = i;
      }
    }
    cur = nxt;
  }
  return picked;
}

struct BallQueryResult {
  std::vector<int> idx;      // [m * nsample]
  std::vector<char> empty;   // [m] 1 when no point fell inside the radius
};

// For each center, gather up to nsample point indices within radius (scan in
// index order, pad by repeating the first hit). A center with an empty ball is
// flagged and padded with its nearest point so downstream pooling stays total.
template <class T>
BallQueryResult ball_query(const std::vector<T>& xyz, int n, const std::vector<T>& centers,
                           int m, double radius, int nsample) {
  BallQueryResult out;
  out.idx.assign(static_cast<size_t>(m) * nsample, 0);
  out.empty.assign(static_cast<size_t>(m), 0);
  const double r2 = radius * radius;
  for (int c = 0; c < m; ++c) {
    const double cx = centers[static_cast<size_t>(c) * 3];
    const double cy = centers[static_cast<size_t>(c) * 3 + 1];
    const double cz = centers[static_cast<size_t>(c) * 3 + 2];
    int found = 0;
    int nearest = 0;
    double nearest_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n && found < nsample; ++i) {
      const double dx = xyz[static_cast<size_t>(i) * 3] - cx;
      const double dy = xyz[static_cast<size_t>(i) * 3 + 1] - cy;
      const double dz = xyz[static_cast<size_t>(i) * 3 + 2] - cz;
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < nearest_d) {
        nearest_d = d;
        nearest = i;
      }
      if (d <= r2) {
        out.idx[static_cast<size_t>(c) * nsample + found] = i;
        ++found;
      }
    }
    if (found == 0) {
      // keep scanning for the true nearest point before padding
      for (int i = 0; i < n; ++i) {
        const double dx = xyz[static_cast<size_t>(i) * 3] - cx;
        const double dy = xyz[static_cast<size_t>(i) * 3 + 1] - cy;
        const double dz = xyz[static_cast<size_t>(i) * 3 + 2] - cz;
        const double d = dx * dx + dy * dy + dz * dz;
        if (d < nearest_d) {
          nearest_d = d;
          nearest = i;
        }
      }
      out.empty[static_cast<size_t>(c)] = 1;
      for (int s = 0; s < nsample; ++s) out.idx[static_cast<size_t>(c) * nsample + s] = nearest;
    } else {
      for (int s = found; s < nsample; ++s)
        out.idx[static_cast<size_t>(c) * nsample + s] = out.idx[static_cast<size_t>(c) * nsample];
    }
  }
  return out;
}

// k nearest neighbours of each query among n points; ties broken by lower
// point index. Returns [m * k] indices.
template <class T>
std::vector<int> knn(const std::vector<T>& xyz, int n, const std::vector<T>& queries, int m,
                     int k) {
  if (k <= 0 || k > n) throw validation_error("knn: need 0 < k <= n");
  std::vector<int> out(static_cast<size_t>(m) * k);
  std::vector<std::pair<double, int>> cand(static_cast<size_t>(n));
  for (int q = 0; q < m; ++q) {
    const double qx = queries[static_cast<size_t>(q) * 3];
    const double qy = queries[static_cast<size_t>(q) * 3 + 1];
    const double qz = queries[static_cast<size_t>(q) * 3 + 2];
    for (int i = 0; i < n; ++i) {
      const double dx = xyz[static_cast<size_t>(i) * 3] - qx;
      const double dy = xyz[static_cast<size_t>(i) * 3 + 1] - qy;
      const double dz = xyz[static_cast<size_t>(i) * 3 + 2] - qz;
      cand[static_cast<size_t>(i)] = {dx * dx + dy * dy + dz * dz, i};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int s = 0; s < k; ++s) out[static_cast<size_t>(q) * k + s] = cand[static_cast<size_t>(s)].second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// set abstraction

template <class T>
struct SAResult {
  Tensor<T> centers;        // [m x 3]
  Tensor<T> features;       // [m x dout]
  std::vector<int> center_idx;
  std::vector<char> empty;
};

// PointNet++-style layer: sample centers (FPS unless the caller supplies
// indices), group by ball query, run the caller's shared point MLP on
// [relative xyz ; point features], max-pool per group. Differentiable through
// positions and features; the index structure is pinned via the cache.
template <class T>
SAResult<T> set_abstraction(const Tensor<T>& positions, const Tensor<T>& features, int npoint,
                            double radius, int nsample,
                            const std::function<Tensor<T>(const Tensor<T>&)>& point_mlp,
                            DiscreteCache* cache, std::vector<int> center_idx = {}) {
  const int n = positions.dim(0);
  if (positions.dim(1) != 3) throw validation_error("set_abstraction: positions must be [n x 3]");
  if (center_idx.empty()) center_idx = fps(positions.val(), n, npoint);
  center_idx = pin(cache, std::move(center_idx));
  const int m = static_cast<int>(center_idx.size());

  SAResult<T> out;
  out.center_idx = center_idx;
  out.centers = gather_rows(positions, center_idx);

  auto bq = ball_query(positions.val(), n, out.centers.val(), m, radius, nsample);
  bq.idx = pin(cache, std::move(bq.idx));
  {
    std::vector<int> flags(bq.empty.begin(), bq.empty.end());
    flags = pin(cache, std::move(flags));
    out.empty.assign(flags.begin(), flags.end());
  }

  auto grouped_xyz = gather_rows(positions, bq.idx);
  auto rel = sub_group_broadcast(grouped_xyz, out.centers, nsample);
  Tensor<T> mlp_in = rel;
  if (features.defined() && features.size() > 0) {
    auto grouped_feat = gather_rows(features, bq.idx);
    mlp_in = concat_cols<T>({rel, grouped_feat});
  }
  auto h = point_mlp(mlp_in);
  out.features = group_max_pool(h, nsample);
  return out;
}

// ---------------------------------------------------------------------------
// positional encodings

// Random Fourier features of xyz with a frozen Gaussian matrix B [3 x d/2]:
// [sin(2*pi*x B) ; cos(2*pi*x B)].
template <class T>
Tensor<T> fourier_pe(const Tensor<T>& xyz, const Tensor<T>& B) {
  auto proj = scale(matmul(xyz, B), static_cast<T>(2.0 * M_PI));
  return concat_cols<T>({sin_ew(proj), cos_ew(proj)});
}

// Classic transformer sinusoid for integer positions; base 10000, even slots
// sine, odd slots cosine, so t = 0 encodes to [0, 1, 0, 1, ...].
template <class T>
std::vector<T> sinusoid_pe(int t, int d, double base = 10000.0) {
  std::vector<T> pe(static_cast<size_t>(d));
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(base, -2.0 * i / static_cast<double>(d));
    pe[static_cast<size_t>(2 * i)] = static_cast<T>(std::sin(t * freq));
    pe[static_cast<size_t>(2 * i) + 1] = static_cast<T>(std::cos(t * freq));
  }
  return pe;
}

// ---------------------------------------------------------------------------
// axis-aligned box arithmetic (value kernels for matching / eval)

struct Box {
  std::array<double, 3> center{};
  std::array<double, 3> size{};

  double volume() const {
    return std::max(size[0], 0.0) * std::max(size[1], 0.0) * std::max(size[2], 0.0);
  }
  double lo(int a) const { return center[a] - size[a] * 0.5; }
  double hi(int a) const { return center[a] + size[a] * 0.5; }
};

inline double box_intersection(const Box& a, const Box& b) {
  double v = 1.0;
  for (int ax = 0; ax < 3; ++ax) {
    const double w = std::min(a.hi(ax), b.hi(ax)) - std::max(a.lo(ax), b.lo(ax));
    if (w <= 0.0) return 0.0;
    v *= w;
  }
  return v;
}

inline double box_iou(const Box& a, const Box& b) {
  const double inter = box_intersection(a, b);
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double box_giou(const Box& a, const Box& b) {
  const double inter = box_intersection(a, b);
  const double uni = a.volume() + b.volume() - inter;
  double hull = 1.0;
  for (int ax = 0; ax < 3; ++ax)
    hull *= std::max(a.hi(ax), b.hi(ax)) - std::min(a.lo(ax), b.lo(ax));
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return hull > 0.0 ? iou - (hull - uni) / hull : iou;
}

// Greedy NMS: order by descending score (ties keep the lower index first),
// suppress boxes whose IoU with a kept box exceeds the threshold.
inline std::vector<int> nms_3d(const std::vector<Box>& boxes, const std::vector<double>& scores,
                               double iou_threshold) {
  const int n = static_cast<int>(boxes.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
  std::vector<char> dead(static_cast<size_t>(n), 0);
  std::vector<int> keep;
  for (int oi = 0; oi < n; ++oi) {
    const int i = order[static_cast<size_t>(oi)];
    if (dead[static_cast<size_t>(i)]) continue;
    keep.push_back(i);
    for (int oj = oi + 1; oj < n; ++oj) {
      const int j = order[static_cast<size_t>(oj)];
      if (!dead[static_cast<size_t>(j)] &&
          box_iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) > iou_threshold)
        dead[static_cast<size_t>(j)] = 1;
    }
  }
  return keep;
}

// ---------------------------------------------------------------------------
// differentiable GIoU over matched rows

// pred_c/pred_s and gt_c/gt_s are [m x 3]; returns per-row GIoU [m]. The gt
// side is normally a constant tensor.
template <class T>
Tensor<T> giou_rows(const Tensor<T>& pred_c, const Tensor<T>& pred_s, const Tensor<T>& gt_c,
                    const Tensor<T>& gt_s) {
  const int m = pred_c.dim(0);
  auto half = [&](const Tensor<T>& s) { return scale(s, T(0.5)); };
  auto pmin = sub(pred_c, half(pred_s));
  auto pmax = add(pred_c, half(pred_s));
  auto gmin = sub(gt_c, half(gt_s));
  auto gmax = add(gt_c, half(gt_s));

  auto inter_wh = relu(sub(min_ew(pmax, gmax), max_ew(pmin, gmin)));
  auto inter = row_prod(inter_wh);                       // [m]
  auto vol_p = row_prod(relu(pred_s));
  auto vol_g = row_prod(gt_s);
  auto uni = sub(add(vol_p, vol_g), inter);
  auto iou = div_ew(inter, uni);

  auto hull = row_prod(sub(max_ew(pmax, gmax), min_ew(pmin, gmin)));
  auto ones = Tensor<T>::from({m}, std::vector<T>(static_cast<size_t>(m), T(1)));
  auto hull_term = sub(ones, div_ew(uni, hull));         // (hull - union) / hull
  return sub(iou, hull_term);
}

}  // namespace bica
