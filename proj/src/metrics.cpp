#include "flowattn/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace flowattn {

void Tube::validate() const {
  if (t1 > t2) throw ContractError("tube: t1 > t2");
  if (boxes.size() != static_cast<std::size_t>(t2 - t1 + 1)) {
    throw ContractError("tube: " + std::to_string(boxes.size()) + " boxes for " +
                        std::to_string(t2 - t1 + 1) + " frames");
  }
  for (const Box& b : boxes) {
    if (!b.ordered()) throw ContractError("tube: box coordinates out of order");
  }
}

void Triplet::validate() const {
  if (t1 > t2) throw ContractError("triplet: t1 > t2");
  subject_tube.validate();
  object_tube.validate();
  if (subject_tube.t1 != t1 || subject_tube.t2 != t2 || object_tube.t1 != t1 ||
      object_tube.t2 != t2) {
    throw ContractError("triplet: tube intervals disagree with the triplet interval");
  }
}

void TripletSet::validate() const {
  for (const Triplet& t : triplets) t.validate();
}

namespace {

double box_intersection(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

}  // namespace

double tube_iou(const Tube& a, const Tube& b) {
  a.validate();
  b.validate();
  const int lo = std::min(a.t1, b.t1);
  const int hi = std::max(a.t2, b.t2);
  double inter = 0.0, uni = 0.0;
  for (int f = lo; f <= hi; ++f) {
    const bool in_a = f >= a.t1 && f <= a.t2;
    const bool in_b = f >= b.t1 && f <= b.t2;
    if (in_a && in_b) {
      const Box& ba = a.boxes[static_cast<std::size_t>(f - a.t1)];
      const Box& bb = b.boxes[static_cast<std::size_t>(f - b.t1)];
      const double i = box_intersection(ba, bb);
      inter += i;
      uni += ba.area() + bb.area() - i;
    } else if (in_a) {
      uni += a.boxes[static_cast<std::size_t>(f - a.t1)].area();
    } else if (in_b) {
      uni += b.boxes[static_cast<std::size_t>(f - b.t1)].area();
    }
  }
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double time_iou(int a_t1, int a_t2, int b_t1, int b_t2) {
  if (a_t1 > a_t2 || b_t1 > b_t2) throw ContractError("time_iou: invalid interval");
  const int overlap = std::min(a_t2, b_t2) - std::max(a_t1, b_t1) + 1;
  if (overlap <= 0) return 0.0;
  const int len_a = a_t2 - a_t1 + 1;
  const int len_b = b_t2 - b_t1 + 1;
  return static_cast<double>(overlap) / static_cast<double>(len_a + len_b - overlap);
}

std::vector<Match> match_triplets(const TripletSet& pred, const TripletSet& gt,
                                  std::size_t k) {
  pred.validate();
  gt.validate();
  if (k < 1) throw ContractError("match_triplets: K must be >= 1");

  std::vector<std::size_t> order(pred.triplets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pred.triplets[a].score > pred.triplets[b].score;
  });
  if (order.size() > k) order.resize(k);

  std::vector<char> taken(gt.triplets.size(), 0);
  std::vector<Match> matches;
  for (std::size_t pi : order) {
    const Triplet& p = pred.triplets[pi];
    int best = -1;
    double best_overlap = -1.0;
    for (std::size_t gi = 0; gi < gt.triplets.size(); ++gi) {
      if (taken[gi]) continue;
      const Triplet& g = gt.triplets[gi];
      if (p.relation != g.relation || p.subject_cat != g.subject_cat ||
          p.object_cat != g.object_cat) {
        continue;
      }
      const double siou = tube_iou(p.subject_tube, g.subject_tube);
      if (siou <= 0.5) continue;
      const double oiou = tube_iou(p.object_tube, g.object_tube);
      if (oiou <= 0.5) continue;
      if (siou + oiou > best_overlap) {
        best_overlap = siou + oiou;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = 1;
      const Triplet& g = gt.triplets[static_cast<std::size_t>(best)];
      matches.push_back({best, static_cast<int>(pi), time_iou(p.t1, p.t2, g.t1, g.t2)});
    }
  }
  return matches;
}

double recall_at_k(const TripletSet& pred, const TripletSet& gt, std::size_t k) {
  if (gt.triplets.empty()) throw ContractError("recall_at_k: empty ground truth");
  double total = 0.0;
  for (const Match& m : match_triplets(pred, gt, k)) total += m.weight;
  return total / static_cast<double>(gt.triplets.size());
}

double mean_recall_at_k(const TripletSet& pred, const TripletSet& gt, std::size_t k) {
  if (gt.triplets.empty()) throw ContractError("mean_recall_at_k: empty ground truth");
  std::map<int, double> weight_by_cat;
  std::map<int, std::size_t> count_by_cat;
  for (const Triplet& g : gt.triplets) count_by_cat[g.relation]++;
  const auto matches = match_triplets(pred, gt, k);
  for (const Match& m : matches) {
    weight_by_cat[gt.triplets[static_cast<std::size_t>(m.gt_index)].relation] += m.weight;
  }
  double acc = 0.0;
  for (const auto& [cat, count] : count_by_cat) {
    const auto it = weight_by_cat.find(cat);
    const double w = it == weight_by_cat.end() ? 0.0 : it->second;
    acc += w / static_cast<double>(count);
  }
  return acc / static_cast<double>(count_by_cat.size());
}

}  // namespace flowattn
