#pragma once

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "transmix/numerics.hpp"

namespace transmix {

/// Batched mixer input for N samples of n agents.
template <typename Scalar>
struct MixerInput {
  Var<Scalar> q;          // [N, n] chosen-action values
  Var<Scalar> histories;  // [N*n, d_h] agent hidden states, sample-major
  Var<Scalar> state;      // [N, s_dim]
};

namespace detail {

template <typename Scalar>
Index check_mixer_input(const char* kind, const MixerInput<Scalar>& in, Index n_agents, Index state_dim,
                        Index history_dim) {
  const auto& qs = in.q.shape();
  if (qs.size() != 2 || (n_agents > 0 && qs[1] != n_agents)) {
    throw ShapeError(std::string(kind) + ": q has shape " + shape_str(qs) + ", expected [N," +
                     std::to_string(n_agents) + "]");
  }
  const Index n = qs[0];
  if (state_dim > 0) {
    const auto& ss = in.state.shape();
    if (ss.size() != 2 || ss[0] != n || ss[1] != state_dim) {
      throw ShapeError(std::string(kind) + ": state has shape " + shape_str(ss) + ", expected [" +
                       std::to_string(n) + "," + std::to_string(state_dim) + "]");
    }
  }
  if (history_dim > 0) {
    const auto& hs = in.histories.shape();
    if (hs.size() != 2 || hs[0] != n * qs[1] || hs[1] != history_dim) {
      throw ShapeError(std::string(kind) + ": histories have shape " + shape_str(hs) + ", expected [" +
                       std::to_string(n * qs[1]) + "," + std::to_string(history_dim) + "]");
    }
  }
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// VDN

template <typename Scalar>
struct VdnParams {
  Index n_agents = 1;

  template <typename F>
  void visit(F&&) {}
};

/// Q_tot = sum_i q_i, returned as [N, 1].
template <typename Scalar>
Var<Scalar> vdn_forward(const Var<Scalar>& q) {
  if (q.shape().size() != 2) throw ShapeError("vdn_forward: q must be [N, n], got " + shape_str(q.shape()));
  return reshape(sum(q, 1), {q.dim(0), 1});
}

// ---------------------------------------------------------------------------
// QMIX

struct QmixDims {
  Index n_agents = 1;
  Index state_dim = 1;
  Index embed_dim = 32;
};

/// State-conditioned hypernetworks producing the monotonic mixing weights.
template <typename Scalar>
struct QmixParams {
  QmixDims dims;
  LinearParams<Scalar> hyper_w1;  // s -> n*m
  LinearParams<Scalar> hyper_b1;  // s -> m
  LinearParams<Scalar> hyper_w2;  // s -> m
  LinearParams<Scalar> value1;    // s -> m
  LinearParams<Scalar> value2;    // m -> 1

  QmixParams() = default;
  explicit QmixParams(const QmixDims& d)
      : dims(d),
        hyper_w1(d.state_dim, d.n_agents * d.embed_dim),
        hyper_b1(d.state_dim, d.embed_dim),
        hyper_w2(d.state_dim, d.embed_dim),
        value1(d.state_dim, d.embed_dim),
        value2(d.embed_dim, 1) {}

  template <typename Rng>
  void init(Rng& rng) {
    hyper_w1.init(rng);
    hyper_b1.init(rng);
    hyper_w2.init(rng);
    value1.init(rng);
    value2.init(rng);
  }

  template <typename F>
  void visit(F&& f) {
    hyper_w1.visit("mixer.hyper_w1", f);
    hyper_b1.visit("mixer.hyper_b1", f);
    hyper_w2.visit("mixer.hyper_w2", f);
    value1.visit("mixer.value1", f);
    value2.visit("mixer.value2", f);
  }
};

/// Q_tot = |W2(s)|^T elu(|W1(s)|^T q + b1(s)) + v(s), returned as [N, 1].
template <typename Scalar>
Var<Scalar> qmix_forward(Tape<Scalar>& tape, QmixParams<Scalar>& p, const MixerInput<Scalar>& in) {
  const auto& d = p.dims;
  const Index n = detail::check_mixer_input("qmix_forward", in, d.n_agents, d.state_dim, 0);
  const Index m = d.embed_dim;
  auto w1 = reshape(abs(bind(tape, p.hyper_w1)(in.state)), {n, d.n_agents, m});
  auto b1 = bind(tape, p.hyper_b1)(in.state);
  auto w2 = abs(bind(tape, p.hyper_w2)(in.state));
  auto v = bind(tape, p.value2)(relu(bind(tape, p.value1)(in.state)));
  auto hidden = elu(sum(reshape(in.q, {n, d.n_agents, 1}) * w1, 1) + b1);
  return reshape(sum(hidden * w2, 1), {n, 1}) + v;
}

// ---------------------------------------------------------------------------
// Additive attention

/// Multi-head additive attention over the token axis.
/// tokens [N, T, H, dk], w [1, 1, H, dk] -> [N, H, dk] with
/// alpha_t = softmax_t(<w, x_t> / sqrt(dk)) and output sum_t alpha_t x_t.
template <typename Scalar>
Var<Scalar> additive_attention_heads(const Var<Scalar>& tokens, const Var<Scalar>& w) {
  const auto& s = tokens.shape();
  if (s.size() != 4) throw ShapeError("additive_attention: tokens must be [N,T,H,dk], got " + shape_str(s));
  if (w.shape() != Shape{1, 1, s[2], s[3]}) {
    throw ShapeError("additive_attention: weights " + shape_str(w.shape()) + " do not match tokens " + shape_str(s));
  }
  const Index n = s[0], t = s[1], h = s[2], dk = s[3];
  auto scores = scale(sum(tokens * w, 3), Scalar(1) / std::sqrt(static_cast<Scalar>(dk)));  // [N,T,H]
  auto alpha = reshape(softmax(scores, 1), {n, t, h, 1});
  return sum(alpha * tokens, 1);
}

/// Single-head form: tokens [T, d], w [d] -> pooled [d].
template <typename Scalar>
Var<Scalar> additive_attention(const Var<Scalar>& tokens, const Var<Scalar>& w) {
  if (tokens.shape().size() != 2) {
    throw ShapeError("additive_attention: tokens must be [T, d], got " + shape_str(tokens.shape()));
  }
  const Index t = tokens.dim(0), d = tokens.dim(1);
  if (w.numel() != d) {
    throw ShapeError("additive_attention: weights " + shape_str(w.shape()) + " do not match tokens " +
                     shape_str(tokens.shape()));
  }
  auto pooled = additive_attention_heads(reshape(tokens, {1, t, 1, d}), reshape(w, {1, 1, 1, d}));
  return reshape(pooled, {d});
}

// ---------------------------------------------------------------------------
// TransMix

struct TransMixDims {
  Index n_agents = 1;
  Index state_dim = 1;
  Index history_dim = 1;
  Index layers = 2;
  Index heads = 4;
  Index model_dim = 32;
  Index state_tokens = 4;
  Index skip_dim = 16;

  Index head_dim() const { return model_dim / heads; }

  void validate() const {
    if (layers < 2 || layers > 6) throw ShapeError("transmix: layers must be in [2, 6]");
    if (heads < 1 || model_dim < 1 || model_dim % heads != 0) {
      throw ShapeError("transmix: model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                       std::to_string(heads));
    }
    if (state_tokens < 1 || skip_dim < 1 || n_agents < 1 || state_dim < 1 || history_dim < 1) {
      throw ShapeError("transmix: dimensions must be positive");
    }
  }
};

template <typename Scalar>
struct TransMixLayerParams {
  LinearParams<Scalar> state_embed;  // s -> T_s * d_m
  LinearParams<Scalar> q_embed;      // 1 -> d_m, shared across agents
  Tensor<Scalar> attn_state;         // [1, d_m]: per-head w_alpha, concatenated
  Tensor<Scalar> attn_key;           // [1, d_m]: per-head w_beta, concatenated
  LinearParams<Scalar> out;          // d_m -> d_m

  TransMixLayerParams() = default;
  explicit TransMixLayerParams(const TransMixDims& d)
      : state_embed(d.state_dim, d.state_tokens * d.model_dim),
        q_embed(1, d.model_dim),
        attn_state({1, d.model_dim}),
        attn_key({1, d.model_dim}),
        out(d.model_dim, d.model_dim) {}
};

/// Weight-shared transformer mixer; no parameter depends on the state
/// through a hypernetwork.
template <typename Scalar>
struct TransMixParams {
  TransMixDims dims;
  LinearParams<Scalar> history_embed;  // d_h -> d_m, feeds the first layer's value tokens
  std::vector<TransMixLayerParams<Scalar>> layers;
  LinearParams<Scalar> skip;  // [q_i ; h_i] (1 + d_h) -> d_skip
  LinearParams<Scalar> head;  // [v ; s ; k] (2 d_m + d_skip) -> 1

  TransMixParams() = default;
  explicit TransMixParams(const TransMixDims& d)
      : dims(d),
        history_embed(d.history_dim, d.model_dim),
        skip(1 + d.history_dim, d.skip_dim),
        head(2 * d.model_dim + d.skip_dim, 1) {
    d.validate();
    for (Index l = 0; l < d.layers; ++l) layers.emplace_back(d);
  }

  template <typename Rng>
  void init(Rng& rng) {
    history_embed.init(rng);
    const Scalar attn_bound = Scalar(1) / std::sqrt(static_cast<Scalar>(dims.head_dim()));
    for (auto& l : layers) {
      l.state_embed.init(rng);
      l.q_embed.init(rng);
      fill_uniform(l.attn_state, attn_bound, rng);
      fill_uniform(l.attn_key, attn_bound, rng);
      l.out.init(rng);
    }
    skip.init(rng);
    head.init(rng);
    // Sign anchor: the q_i row of the bottleneck and the head's skip inputs
    // start non-negative, so Q_tot initially increases with every q_i and
    // greedy per-agent actions point the same way as the mixer. Training is
    // unconstrained afterwards.
    auto sw = skip.weight.matrix();
    sw.row(0) = sw.row(0).cwiseAbs();
    auto hw = head.weight.matrix();
    hw.bottomRows(dims.skip_dim) = hw.bottomRows(dims.skip_dim).cwiseAbs();
  }

  template <typename F>
  void visit(F&& f) {
    history_embed.visit("mixer.history_embed", f);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "mixer.layer" + std::to_string(i);
      layers[i].state_embed.visit(p + ".state_embed", f);
      layers[i].q_embed.visit(p + ".q_embed", f);
      f(p + ".attn_state", layers[i].attn_state);
      f(p + ".attn_key", layers[i].attn_key);
      layers[i].out.visit(p + ".out", f);
    }
    skip.visit("mixer.skip", f);
    head.visit("mixer.head", f);
  }
};

template <typename Scalar>
struct TransMixLayerOutput {
  Var<Scalar> tokens;         // [N*n, d_m]
  Var<Scalar> state_summary;  // [N, d_m], per-head global queries concatenated
};

/// One encoder layer. Per head: the embedded state tokens are pooled into a
/// global query g; each agent's embedded q_i is gated by g and pooled into a
/// global key k; each value token is gated by k. Heads are concatenated,
/// linearly transformed, and added back onto the value tokens.
template <typename Scalar>
TransMixLayerOutput<Scalar> transmix_layer(Tape<Scalar>& tape, const TransMixDims& d, TransMixLayerParams<Scalar>& p,
                                           const Var<Scalar>& state, const Var<Scalar>& q, const Var<Scalar>& values) {
  d.validate();
  const Index n = detail::check_mixer_input("transmix_layer", MixerInput<Scalar>{q, {}, state}, d.n_agents,
                                            d.state_dim, 0);
  const Index agents = d.n_agents, h = d.heads, dk = d.head_dim(), dm = d.model_dim;
  if (values.shape() != Shape{n * agents, dm}) {
    throw ShapeError("transmix_layer: value tokens have shape " + shape_str(values.shape()) + ", expected [" +
                     std::to_string(n * agents) + "," + std::to_string(dm) + "]");
  }
  auto w_alpha = reshape(tape.param(p.attn_state), {1, 1, h, dk});
  auto w_beta = reshape(tape.param(p.attn_key), {1, 1, h, dk});

  auto state_tokens = reshape(bind(tape, p.state_embed)(state), {n, d.state_tokens, h, dk});
  auto query = additive_attention_heads(state_tokens, w_alpha);  // [N,H,dk]

  auto keys = reshape(bind(tape, p.q_embed)(reshape(q, {n * agents, 1})), {n, agents, h, dk});
  auto gated_keys = keys * reshape(query, {n, 1, h, dk});
  auto key = additive_attention_heads(gated_keys, w_beta);  // [N,H,dk]

  auto gated_values = reshape(reshape(values, {n, agents, h, dk}) * reshape(key, {n, 1, h, dk}), {n * agents, dm});
  auto tokens = bind(tape, p.out)(gated_values) + values;
  return {tokens, reshape(query, {n, dm})};
}

/// Full mixer: L stacked layers, mean-pooled value tokens, the last layer's
/// state summary, and a mean-pooled shared bottleneck over [q_i ; h_i],
/// concatenated into a linear head. Returns [N, 1].
template <typename Scalar>
Var<Scalar> transmix_forward(Tape<Scalar>& tape, TransMixParams<Scalar>& p, const MixerInput<Scalar>& in) {
  const auto& d = p.dims;
  d.validate();
  const Index n = detail::check_mixer_input("transmix_forward", in, d.n_agents, d.state_dim, d.history_dim);
  const Index agents = d.n_agents;
  auto values = bind(tape, p.history_embed)(in.histories);
  Var<Scalar> summary;
  for (auto& layer : p.layers) {
    auto out = transmix_layer(tape, d, layer, in.state, in.q, values);
    values = out.tokens;
    summary = out.state_summary;
  }
  auto pooled_values = mean(reshape(values, {n, agents, d.model_dim}), 1);
  auto skip_in = concat<Scalar>({reshape(in.q, {n * agents, 1}), in.histories}, 1);
  auto pooled_skip = mean(reshape(bind(tape, p.skip)(skip_in), {n, agents, d.skip_dim}), 1);
  return bind(tape, p.head)(concat<Scalar>({pooled_values, summary, pooled_skip}, 1));
}

// ---------------------------------------------------------------------------
// Runtime-selected mixer

enum class MixerKind { kVdn, kQmix, kTransMix };

inline const char* mixer_name(MixerKind k) {
  switch (k) {
    case MixerKind::kVdn:
      return "vdn";
    case MixerKind::kQmix:
      return "qmix";
    case MixerKind::kTransMix:
      return "transmix";
  }
  return "?";
}

template <typename Scalar>
using MixerParams = std::variant<VdnParams<Scalar>, QmixParams<Scalar>, TransMixParams<Scalar>>;

template <typename Scalar>
Var<Scalar> mixer_forward(Tape<Scalar>& tape, MixerParams<Scalar>& params, const MixerInput<Scalar>& in) {
  return std::visit(
      [&](auto& p) -> Var<Scalar> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, VdnParams<Scalar>>) {
          detail::check_mixer_input("vdn_forward", in, p.n_agents, 0, 0);
          return vdn_forward(in.q);
        } else if constexpr (std::is_same_v<P, QmixParams<Scalar>>) {
          return qmix_forward(tape, p, in);
        } else {
          return transmix_forward(tape, p, in);
        }
      },
      params);
}

template <typename Scalar, typename F>
void visit_params(MixerParams<Scalar>& params, F&& f) {
  std::visit([&](auto& p) { p.visit(f); }, params);
}

template <typename Scalar, typename Rng>
void init_params(MixerParams<Scalar>& params, Rng& rng) {
  std::visit(
      [&](auto& p) {
        if constexpr (!std::is_same_v<std::decay_t<decltype(p)>, VdnParams<Scalar>>) p.init(rng);
      },
      params);
}

}  // namespace transmix
