#pragma once

#include <string>
#include <vector>

#include "flowattn/errors.hpp"

namespace flowattn {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double area() const { return (x2 - x1) * (y2 - y1); }
  bool ordered() const { return x1 <= x2 && y1 <= y2; }
};

// Per-frame axis-aligned boxes over the inclusive frame interval [t1, t2].
struct Tube {
  int t1 = 0, t2 = 0;
  std::vector<Box> boxes;  // one per frame, boxes[f] covers frame t1 + f
  void validate() const;
};

// One scene-graph triplet: a relation between a subject and an object, each
// carried by a mask tube over the shared time interval.
struct Triplet {
  int relation = 0;
  int t1 = 0, t2 = 0;
  int subject_cat = 0, object_cat = 0;
  Tube subject_tube, object_tube;
  double score = 0.0;  // predictions only
  void validate() const;
};

struct TripletSet {
  std::string video;
  int frame_count = 0;
  std::vector<Triplet> triplets;
  void validate() const;
};

// Volume IOU of two tubes: summed per-frame intersection areas over summed
// per-frame union areas. Frames covered by only one tube contribute zero
// intersection and that tube's box area to the union. Two zero-volume tubes
// give 0.
double tube_iou(const Tube& a, const Tube& b);

// Inclusive frame-interval IOU: overlap count / union count.
double time_iou(int a_t1, int a_t2, int b_t1, int b_t2);

struct Match {
  int gt_index = -1;
  int pred_index = -1;
  double weight = 0.0;  // soft recall credit: time IOU of the two intervals
};

// Greedy matching of the top-K predictions (by descending score, ties broken
// by lower index) against ground truth. A prediction recalls a ground-truth
// triplet iff relation, subject and object categories all agree and both tube
// IOUs exceed 0.5. Each ground truth is consumed at most once; among eligible
// candidates a prediction takes the one with the highest subject+object tube
// IOU. The spatial gate is hard; the time IOU enters only as the credit
// weight.
std::vector<Match> match_triplets(const TripletSet& pred, const TripletSet& gt,
                                  std::size_t k);

// R@K: total soft-recall weight of matched ground truth / |gt|.
double recall_at_k(const TripletSet& pred, const TripletSet& gt, std::size_t k);

// mR@K: unweighted mean of per-relation-category R@K over the categories
// present in the ground truth.
double mean_recall_at_k(const TripletSet& pred, const TripletSet& gt, std::size_t k);

}  // namespace flowattn
