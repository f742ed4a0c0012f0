#include "flowattn/encoder.hpp"

#include <cmath>

namespace flowattn {

using namespace ad;

void EncoderLayerParams::validate() const {
  const std::size_t d = wq.rows();
  if (head_count < 1) throw ContractError("encoder layer: head_count must be >= 1");
  if (d % static_cast<std::size_t>(head_count) != 0) {
    throw ShapeError("encoder layer: width " + std::to_string(d) +
                     " not divisible by " + std::to_string(head_count) + " heads");
  }
  if (wq.cols() != d || !wk.same_shape(wq) || !wv.same_shape(wq) || !wo.same_shape(wq)) {
    throw ShapeError("encoder layer: attention projections must all be " +
                     std::to_string(d) + "x" + std::to_string(d));
  }
  if (ffn_w1.rows() != d || ffn_w2.cols() != d || ffn_w1.cols() != ffn_w2.rows()) {
    throw ShapeError("encoder layer: feed-forward shapes " + ffn_w1.shape_str() +
                     ", " + ffn_w2.shape_str() + " inconsistent with width " +
                     std::to_string(d));
  }
  if (sigma_t <= 0.0) throw ContractError("encoder layer: sigma_t must be positive");
}

namespace ad {

Var layer_norm(Var x, Var gamma, Var beta) {
  Tape& t = *x.tape;
  const std::size_t d = t.value(x).cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  Var mean = scale(sum_rows(x), inv_d);
  Var centered = sub(x, mean);
  Var var = scale(sum_rows(mul(centered, centered)), inv_d);
  Var denom = sqrt(add_scalar(var, 1e-6));
  return add(mul(div(centered, denom), gamma), beta);
}

Var hierarchy_attention(Var q, Var k, Var v, Var mask) {
  check_binary(q, k, "hierarchy_attention");
  check_binary(k, v, "hierarchy_attention");
  check_binary(q, mask, "hierarchy_attention");
  Tape& t = *q.tape;
  const Tensor& qv = t.value(q);
  const Tensor& mv = t.value(mask);
  if (mv.rows() != qv.rows() || mv.cols() != t.value(k).rows()) {
    throw ShapeError("hierarchy_attention: mask " + mv.shape_str() +
                     " does not cover " + std::to_string(qv.rows()) + " queries x " +
                     std::to_string(t.value(k).rows()) + " keys");
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(qv.cols()));
  Var scores = scale(matmul(q, transpose(k)), inv_scale);
  return matmul(mul(mask, softmax_rows(scores)), v);
}

Var plain_attention(Var q, Var k, Var v) {
  check_binary(q, k, "plain_attention");
  check_binary(k, v, "plain_attention");
  const double inv_scale =
      1.0 / std::sqrt(static_cast<double>(q.tape->value(q).cols()));
  Var scores = scale(matmul(q, transpose(k)), inv_scale);
  return matmul(softmax_rows(scores), v);
}

}  // namespace ad

Var Binder::operator()(Tensor& t) {
  for (const auto& [ptr, var] : bound_) {
    if (ptr == &t) return var;
  }
  Var v = tape_->leaf(t);
  bound_.emplace_back(&t, v);
  return v;
}

namespace {

Var feed_forward(Binder& bind, Var x, EncoderLayerParams& p) {
  Var h = gelu(add(matmul(x, bind(p.ffn_w1)), bind(p.ffn_b1)));
  return add(matmul(h, bind(p.ffn_w2)), bind(p.ffn_b2));
}

// Pre-norm block; the mask, when used, is shared across heads.
Var encoder_block(Binder& bind, Var x, EncoderLayerParams& p, Var mask, bool with_mask) {
  Tape& t = bind.tape();
  const std::size_t len = t.value(x).rows();
  const std::size_t d = t.value(x).cols();
  if (p.wq.rows() != d) {
    throw ShapeError("encoder layer: input width " + std::to_string(d) +
                     " vs projection " + p.wq.shape_str());
  }
  Var u = layer_norm(x, bind(p.ln1_gamma), bind(p.ln1_beta));
  Var qf = matmul(u, bind(p.wq));
  Var kf = matmul(u, bind(p.wk));
  Var vf = matmul(u, bind(p.wv));

  const std::size_t dh = d / static_cast<std::size_t>(p.head_count);
  Var heads;
  for (int h = 0; h < p.head_count; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    Var qh = slice(qf, 0, len, off, dh);
    Var kh = slice(kf, 0, len, off, dh);
    Var vh = slice(vf, 0, len, off, dh);
    Var rh = with_mask ? hierarchy_attention(qh, kh, vh, mask)
                       : plain_attention(qh, kh, vh);
    heads = (h == 0) ? rh : concat_cols(heads, rh);
  }
  Var h1 = add(x, matmul(heads, bind(p.wo)));
  return add(h1, feed_forward(bind, layer_norm(h1, bind(p.ln2_gamma), bind(p.ln2_beta)), p));
}

// Fresh per-pair affinities of a (sub)sequence, from its current representations.
Var fresh_affinity(Binder& bind, Var tokens, EncoderLayerParams& p) {
  Var s = neighbor_scores(tokens, bind(p.nb_wq), bind(p.nb_wk), p.sigma_t);
  return affinity(neighbor_probs(s));
}

}  // namespace

EncoderResult encoder_forward(Binder& bind, Var x,
                              std::span<EncoderLayerParams> layers,
                              const SequenceLayout& layout, MaskMode mode,
                              AffinityCarry* carry) {
  Tape& t = bind.tape();
  const std::size_t len = t.value(x).rows();
  const std::size_t d = t.value(x).cols();
  if (len < 1) throw ContractError("encoder_forward: empty sequence");
  if (layout.is_2d && layout.grid_rows * layout.grid_cols != len) {
    throw ShapeError("encoder_forward: grid " + std::to_string(layout.grid_rows) +
                     "x" + std::to_string(layout.grid_cols) + " does not cover " +
                     std::to_string(len) + " tokens");
  }

  EncoderResult res{x, {}};
  Var acc_1d, acc_h, acc_v;
  bool have_1d = false, have_h = false, have_v = false;
  int layer_index = 0;
  if (carry) {
    acc_1d = carry->seq;
    acc_h = carry->horizontal;
    acc_v = carry->vertical;
    have_1d = carry->has_seq;
    have_h = carry->has_h;
    have_v = carry->has_v;
    layer_index = carry->next_layer_index;
  }

  for (EncoderLayerParams& p : layers) {
    p.validate();
    Var mask;
    bool with_mask = mode != MaskMode::None;
    if (mode == MaskMode::Hierarchy) {
      EncoderLayerState state;
      state.hierarchy.layer_index = layer_index;
      state.hierarchy.sigma_t = p.sigma_t;
      if (!layout.is_2d) {
        if (len >= 2) {
          Var fresh = fresh_affinity(bind, res.output, p);
          acc_1d = have_1d ? affinity_update(acc_1d, fresh) : fresh;
          have_1d = true;
          mask = build_mask_1d(acc_1d);
          state.hierarchy.affinities = t.value(acc_1d);
        } else {
          mask = t.constant(Tensor(1, 1, 1.0));
        }
      } else {
        const std::size_t R = layout.grid_rows, C = layout.grid_cols;
        state.hierarchy.is_2d = true;
        if (C >= 2) {
          Var fresh_h;
          for (std::size_t r = 0; r < R; ++r) {
            Var row = slice(res.output, r * C, C, 0, d);
            Var a = transpose(fresh_affinity(bind, row, p));  // 1 x (C-1)
            fresh_h = (r == 0) ? a : concat_rows(fresh_h, a);
          }
          acc_h = have_h ? affinity_update(acc_h, fresh_h) : fresh_h;
          have_h = true;
        }
        if (R >= 2) {
          Var fresh_v;
          for (std::size_t c = 0; c < C; ++c) {
            std::vector<int> idx(R);
            for (std::size_t r = 0; r < R; ++r) idx[r] = static_cast<int>(r * C + c);
            Var col = gather_rows(res.output, idx);
            Var a = fresh_affinity(bind, col, p);  // (R-1) x 1
            fresh_v = (c == 0) ? a : concat_cols(fresh_v, a);
          }
          acc_v = have_v ? affinity_update(acc_v, fresh_v) : fresh_v;
          have_v = true;
        }
        Var ah = have_h ? acc_h : t.constant(Tensor(R, 0));
        Var av = have_v ? acc_v : t.constant(Tensor(0, C));
        mask = build_mask_2d(ah, av, R, C);
        if (have_h) state.hierarchy.affinities_h = t.value(acc_h);
        if (have_v) state.hierarchy.affinities_v = t.value(acc_v);
      }
      state.mask = t.value(mask);
      res.layers.push_back(std::move(state));
    } else if (mode == MaskMode::ForceOnes) {
      mask = t.constant(Tensor(len, len, 1.0));
    }
    res.output = encoder_block(bind, res.output, p, mask, with_mask);
    ++layer_index;
  }
  if (carry) {
    carry->seq = acc_1d;
    carry->horizontal = acc_h;
    carry->vertical = acc_v;
    carry->has_seq = have_1d;
    carry->has_h = have_h;
    carry->has_v = have_v;
    carry->next_layer_index = layer_index;
  }
  return res;
}

std::pair<Tensor, std::vector<EncoderLayerState>> encoder_forward(
    const Tensor& x, std::span<EncoderLayerParams> layers,
    const SequenceLayout& layout, MaskMode mode) {
  Tape t;
  Binder bind(t);
  EncoderResult res = encoder_forward(bind, t.leaf(x), layers, layout, mode);
  return {t.value(res.output), std::move(res.layers)};
}

Tensor hierarchy_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const HierarchyMask& mask) {
  Tape t;
  return t.value(ad::hierarchy_attention(t.leaf(q), t.leaf(k), t.leaf(v),
                                         t.leaf(mask.C)));
}

EncoderLayerParams make_encoder_layer(std::size_t d, std::size_t d_ff,
                                      int head_count, double sigma_t,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EncoderLayerParams p;
  p.wq = xavier_uniform(d, d, rng);
  p.wk = xavier_uniform(d, d, rng);
  p.wv = xavier_uniform(d, d, rng);
  p.wo = xavier_uniform(d, d, rng);
  p.ln1_gamma = Tensor(1, d, 1.0);
  p.ln1_beta = Tensor(1, d, 0.0);
  p.ln2_gamma = Tensor(1, d, 1.0);
  p.ln2_beta = Tensor(1, d, 0.0);
  p.ffn_w1 = xavier_uniform(d, d_ff, rng);
  p.ffn_b1 = Tensor(1, d_ff, 0.0);
  p.ffn_w2 = xavier_uniform(d_ff, d, rng);
  p.ffn_b2 = Tensor(1, d, 0.0);
  p.nb_wq = xavier_uniform(d, d, rng);
  p.nb_wk = xavier_uniform(d, d, rng);
  p.head_count = head_count;
  p.sigma_t = sigma_t;
  return p;
}

}  // namespace flowattn
