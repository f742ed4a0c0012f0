#pragma once

#include "flowattn/autodiff.hpp"
#include "flowattn/tensor.hpp"

namespace flowattn {

// Non-negativity map applied to queries and keys before any capacity math.
// Both choices are strictly positive, which the conservation divisions rely
// on: Sigmoid maps into (0,1); SoftplusEps adds eps to softplus.
enum class Phi { Sigmoid, SoftplusEps };

struct FlowConfig {
  Phi phi = Phi::Sigmoid;
  double eps = 1e-6;

  void validate() const {
    if (eps <= 0.0) throw ContractError("FlowConfig: eps must be positive");
  }
};

// Capacities for n sinks (queries) and m sources (keys).
//   incoming[i]  = phi(Q_i) . sum_j phi(K_j)        -- raw inflow at sink i
//   outgoing[j]  = phi(K_j) . sum_i phi(Q_i)        -- raw outflow at source j
//   conserved_*  = the same sums taken against the normalized counterpart
//                  (phi(K_j)/outgoing_j resp. phi(Q_i)/incoming_i), so that
//                  each source emits and each sink receives exactly one unit.
struct FlowState {
  Tensor incoming;            // n x 1, strictly positive
  Tensor outgoing;            // m x 1, strictly positive
  Tensor conserved_incoming;  // n x 1
  Tensor conserved_outgoing;  // m x 1
};

namespace ad {

Var apply_phi(Var x, const FlowConfig& cfg);

// Raw capacities, computed by pre-summing phi(K) and phi(Q) column-wise so the
// cost stays O((n+m)d); the n x m score matrix is never formed.
struct FlowCapacities {
  Var incoming;  // n x 1
  Var outgoing;  // m x 1
};
FlowCapacities flow_capacities(Var q, Var k, const FlowConfig& cfg);

struct FlowConservation {
  Var incoming, outgoing;                      // raw
  Var conserved_incoming, conserved_outgoing;  // normalized
  Var phi_q, phi_k;
};
FlowConservation conserve(Var q, Var k, const FlowConfig& cfg);

// Full pipeline: competition (softmax over conserved source capacities
// reweights V), aggregation (normalized queries pull the pre-summed key/value
// product), allocation (sigmoid of conserved sink capacity scales the rows).
Var flow_attention(Var q, Var k, Var v, const FlowConfig& cfg);

}  // namespace ad

// Plain-tensor wrappers over the tape compositions above.
std::pair<Tensor, Tensor> flow_capacities(const Tensor& q, const Tensor& k,
                                          const FlowConfig& cfg);
FlowState conserve(const Tensor& q, const Tensor& k, const FlowConfig& cfg);
Tensor flow_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                      const FlowConfig& cfg);

// Straight-line benchmark kernels, free of tape bookkeeping. The flow variant
// is the same O((n+m)*d*dv) arithmetic as the pipeline; the softmax variant is
// the standard quadratic scaled dot-product baseline.
Tensor flow_attention_eval(const Tensor& q, const Tensor& k, const Tensor& v,
                           const FlowConfig& cfg);
Tensor softmax_attention_eval(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace flowattn
