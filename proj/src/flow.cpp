#include "flowattn/flow.hpp"

#include <cmath>

namespace flowattn {

namespace ad {

Var apply_phi(Var x, const FlowConfig& cfg) {
  cfg.validate();
  if (cfg.phi == Phi::Sigmoid) return sigmoid(x);
  return add_scalar(softplus(x), cfg.eps);
}

namespace {

void check_qk(const Tensor& q, const Tensor& k) {
  if (q.cols() != k.cols()) {
    throw ShapeError("flow: query width " + q.shape_str() +
                     " does not match key width " + k.shape_str());
  }
  if (q.rows() == 0 || k.rows() == 0 || q.cols() == 0) {
    throw ContractError("flow: need at least one sink, one source and one feature");
  }
}

void check_positive(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!(v > 0.0)) {
      throw DomainError(std::string("flow: ") + what +
                        " must be strictly positive; phi violated positivity");
    }
  }
}

}  // namespace

FlowCapacities flow_capacities(Var q, Var k, const FlowConfig& cfg) {
  check_binary(q, k, "flow_capacities");
  check_qk(q.tape->value(q), k.tape->value(k));
  Var pq = apply_phi(q, cfg);
  Var pk = apply_phi(k, cfg);
  // incoming_i = phi(Q_i) . colsum(phi(K)); outgoing_j = phi(K_j) . colsum(phi(Q))
  Var in = matmul(pq, transpose(sum_cols(pk)));
  Var out = matmul(pk, transpose(sum_cols(pq)));
  return {in, out};
}

FlowConservation conserve(Var q, Var k, const FlowConfig& cfg) {
  check_binary(q, k, "conserve");
  check_qk(q.tape->value(q), k.tape->value(k));
  Var pq = apply_phi(q, cfg);
  Var pk = apply_phi(k, cfg);
  Var in = matmul(pq, transpose(sum_cols(pk)));
  Var out = matmul(pk, transpose(sum_cols(pq)));
  check_positive(q.tape->value(in), "incoming capacity");
  check_positive(q.tape->value(out), "outgoing capacity");
  // Normalizing each source by its outflow (and each sink by its inflow)
  // pins both totals at one unit; the conserved capacities re-run the same
  // sums against the normalized counterpart.
  Var in_hat = matmul(pq, transpose(sum_cols(div(pk, out))));
  Var out_hat = matmul(pk, transpose(sum_cols(div(pq, in))));
  return {in, out, in_hat, out_hat, pq, pk};
}

Var flow_attention(Var q, Var k, Var v, const FlowConfig& cfg) {
  check_binary(q, k, "flow_attention");
  check_binary(k, v, "flow_attention");
  const Tensor& kv = k.tape->value(k);
  const Tensor& vv = v.tape->value(v);
  if (kv.rows() != vv.rows()) {
    throw ShapeError("flow_attention: keys " + kv.shape_str() + " and values " +
                     vv.shape_str() + " disagree on the source count");
  }
  FlowConservation fs = conserve(q, k, cfg);
  // Competition: sources compete through a softmax over their conserved
  // outgoing capacities, broadcast across value features.
  Var v_hat = mul(softmax_vec(fs.conserved_outgoing), v);
  // Aggregation: normalized sinks pull the pre-summed key/value product.
  Var agg = matmul(div(fs.phi_q, fs.incoming), matmul(transpose(fs.phi_k), v_hat));
  // Allocation: conserved incoming capacity gates each sink's row.
  return mul(sigmoid(fs.conserved_incoming), agg);
}

}  // namespace ad

std::pair<Tensor, Tensor> flow_capacities(const Tensor& q, const Tensor& k,
                                          const FlowConfig& cfg) {
  Tape t;
  auto caps = ad::flow_capacities(t.leaf(q), t.leaf(k), cfg);
  return {t.value(caps.incoming), t.value(caps.outgoing)};
}

FlowState conserve(const Tensor& q, const Tensor& k, const FlowConfig& cfg) {
  Tape t;
  auto fs = ad::conserve(t.leaf(q), t.leaf(k), cfg);
  return {t.value(fs.incoming), t.value(fs.outgoing),
          t.value(fs.conserved_incoming), t.value(fs.conserved_outgoing)};
}

Tensor flow_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                      const FlowConfig& cfg) {
  Tape t;
  return t.value(ad::flow_attention(t.leaf(q), t.leaf(k), t.leaf(v), cfg));
}

namespace {

inline double phi_scalar(double x, const FlowConfig& cfg) {
  return cfg.phi == Phi::Sigmoid ? sigmoid_scalar(x) : softplus_scalar(x) + cfg.eps;
}

}  // namespace

Tensor flow_attention_eval(const Tensor& q, const Tensor& k, const Tensor& v,
                           const FlowConfig& cfg) {
  cfg.validate();
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), dv = v.cols();
  if (k.cols() != d) throw ShapeError("flow_attention_eval: q/k width mismatch");
  if (v.rows() != m) throw ShapeError("flow_attention_eval: k/v source mismatch");

  Tensor pq(n, d), pk(m, d);
  for (std::size_t i = 0; i < n * d; ++i) pq[i] = phi_scalar(q[i], cfg);
  for (std::size_t i = 0; i < m * d; ++i) pk[i] = phi_scalar(k[i], cfg);

  std::vector<double> sum_pk(d, 0.0), sum_pq(d, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) sum_pk[c] += pk(j, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) sum_pq[c] += pq(i, c);

  std::vector<double> in(n, 0.0), out(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) in[i] += pq(i, c) * sum_pk[c];
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) out[j] += pk(j, c) * sum_pq[c];

  std::vector<double> sum_pk_over_out(d, 0.0), sum_pq_over_in(d, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) sum_pk_over_out[c] += pk(j, c) / out[j];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) sum_pq_over_in[c] += pq(i, c) / in[i];

  std::vector<double> in_hat(n, 0.0), out_hat(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) in_hat[i] += pq(i, c) * sum_pk_over_out[c];
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) out_hat[j] += pk(j, c) * sum_pq_over_in[c];

  // Competition: softmax over the m conserved source capacities.
  double mx = out_hat[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, out_hat[j]);
  double z = 0.0;
  std::vector<double> w(m);
  for (std::size_t j = 0; j < m; ++j) {
    w[j] = std::exp(out_hat[j] - mx);
    z += w[j];
  }
  for (std::size_t j = 0; j < m; ++j) w[j] /= z;

  // Aggregation: phi(K)^T (w . V), then rows scaled by phi(Q)/incoming.
  Tensor ktv(d, dv);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t c = 0; c < d; ++c) {
      const double f = pk(j, c);
      for (std::size_t e = 0; e < dv; ++e) ktv(c, e) += f * w[j] * v(j, e);
    }
  }
  Tensor r(n, dv);
  for (std::size_t i = 0; i < n; ++i) {
    const double gate = sigmoid_scalar(in_hat[i]);
    for (std::size_t c = 0; c < d; ++c) {
      const double f = pq(i, c) / in[i];
      for (std::size_t e = 0; e < dv; ++e) r(i, e) += f * ktv(c, e);
    }
    for (std::size_t e = 0; e < dv; ++e) r(i, e) *= gate;
  }
  return r;
}

Tensor softmax_attention_eval(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), dv = v.cols();
  if (k.cols() != d) throw ShapeError("softmax_attention_eval: q/k width mismatch");
  if (v.rows() != m) throw ShapeError("softmax_attention_eval: k/v source mismatch");
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor r(n, dv);
  std::vector<double> scores(m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      scores[j] = s * inv_scale;
      mx = std::max(mx, scores[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      z += scores[j];
    }
    for (std::size_t j = 0; j < m; ++j) {
      const double w = scores[j] / z;
      for (std::size_t e = 0; e < dv; ++e) r(i, e) += w * v(j, e);
    }
  }
  return r;
}

}  // namespace flowattn
