#pragma once

// Transformer denoiser over latent frequency tokens.
//
// Token sequence per sample: `latent_rows` noisy coefficient rows followed by
// `condition_rows` condition rows (or the learned null token in every
// condition slot). Each token gets a shared input projection, a learned
// positional embedding, a segment embedding (noisy / condition) and the sum
// of the timestep and guidance-scale MLP embeddings. Pre-norm attention and
// feed-forward blocks follow; the outputs at the noisy positions are
// projected back to channel space.

#include <map>
#include <string>
#include <vector>

#include "humancm/common.hpp"
#include "humancm/optim.hpp"
#include "humancm/tape.hpp"

namespace humancm {

struct ArchConfig {
  int model_dim = 64;
  int n_blocks = 2;
  int n_heads = 4;
  int ffn_mult = 2;
  int latent_rows = 15;
  int condition_rows = 15;
  int channel_dim = 15;
  std::uint64_t seed = 1;

  int token_count() const { return latent_rows + condition_rows; }
  int ffn_dim() const { return ffn_mult * model_dim; }

  void validate() const {
    require(model_dim >= 1 && n_blocks >= 1 && n_heads >= 1 && ffn_mult >= 1,
            "model: dim, blocks, heads and ffn_mult must be >= 1");
    require(model_dim % n_heads == 0, "model.dim must be divisible by model.heads");
    require(model_dim % 2 == 0, "model.dim must be even for sinusoidal embeddings");
    require(latent_rows >= 1 && condition_rows >= 1 && channel_dim >= 1,
            "model: token and channel counts must be >= 1");
  }

  bool operator==(const ArchConfig&) const = default;
};

enum class ParamInit { Uniform, Zero, One };

struct ParamSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  ParamInit init = ParamInit::Uniform;
  Eigen::Index fan_in = 1;
};

struct BlockSlots {
  int ln1_gain, ln1_bias, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  int ln2_gain, ln2_bias, ff1_w, ff1_b, ff2_w, ff2_b;
};

/// Canonical array order plus the slot index of every named array.
struct ParamLayout {
  std::vector<ParamSpec> specs;
  int in_w, in_b, pos, seg;
  int time1_w, time1_b, time2_w, time2_b;
  int guide1_w, guide1_b, guide2_w, guide2_b;
  std::vector<BlockSlots> blocks;
  int out_w, out_b, null_token;

  explicit ParamLayout(const ArchConfig& a) {
    const Eigen::Index d = a.model_dim;
    const Eigen::Index c = a.channel_dim;
    const Eigen::Index h = a.ffn_dim();
    in_w = add("in_proj.weight", c, d, ParamInit::Uniform, c);
    in_b = add("in_proj.bias", 1, d, ParamInit::Zero);
    pos = add("pos_embedding", a.token_count(), d, ParamInit::Uniform, d);
    seg = add("segment_embedding", 2, d, ParamInit::Uniform, d);
    time1_w = add("time_mlp.fc1.weight", d, d, ParamInit::Uniform, d);
    time1_b = add("time_mlp.fc1.bias", 1, d, ParamInit::Zero);
    time2_w = add("time_mlp.fc2.weight", d, d, ParamInit::Uniform, d);
    time2_b = add("time_mlp.fc2.bias", 1, d, ParamInit::Zero);
    guide1_w = add("guidance_mlp.fc1.weight", d, d, ParamInit::Uniform, d);
    guide1_b = add("guidance_mlp.fc1.bias", 1, d, ParamInit::Zero);
    guide2_w = add("guidance_mlp.fc2.weight", d, d, ParamInit::Uniform, d);
    guide2_b = add("guidance_mlp.fc2.bias", 1, d, ParamInit::Zero);
    for (int b = 0; b < a.n_blocks; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      BlockSlots s{};
      s.ln1_gain = add(p + "ln1.gain", 1, d, ParamInit::One);
      s.ln1_bias = add(p + "ln1.bias", 1, d, ParamInit::Zero);
      s.q_w = add(p + "attn.q.weight", d, d, ParamInit::Uniform, d);
      s.q_b = add(p + "attn.q.bias", 1, d, ParamInit::Zero);
      s.k_w = add(p + "attn.k.weight", d, d, ParamInit::Uniform, d);
      s.k_b = add(p + "attn.k.bias", 1, d, ParamInit::Zero);
      s.v_w = add(p + "attn.v.weight", d, d, ParamInit::Uniform, d);
      s.v_b = add(p + "attn.v.bias", 1, d, ParamInit::Zero);
      s.o_w = add(p + "attn.o.weight", d, d, ParamInit::Uniform, d);
      s.o_b = add(p + "attn.o.bias", 1, d, ParamInit::Zero);
      s.ln2_gain = add(p + "ln2.gain", 1, d, ParamInit::One);
      s.ln2_bias = add(p + "ln2.bias", 1, d, ParamInit::Zero);
      s.ff1_w = add(p + "ffn.fc1.weight", d, h, ParamInit::Uniform, d);
      s.ff1_b = add(p + "ffn.fc1.bias", 1, h, ParamInit::Zero);
      s.ff2_w = add(p + "ffn.fc2.weight", h, d, ParamInit::Uniform, h);
      s.ff2_b = add(p + "ffn.fc2.bias", 1, d, ParamInit::Zero);
      blocks.push_back(s);
    }
    // Zero output projection: the untrained network predicts exactly zero.
    out_w = add("out_proj.weight", d, c, ParamInit::Zero);
    out_b = add("out_proj.bias", 1, c, ParamInit::Zero);
    null_token = add("null_token", 1, c, ParamInit::Uniform, c);
  }

  std::size_t size() const { return specs.size(); }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& s : specs) n += s.rows * s.cols;
    return n;
  }

 private:
  int add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamInit init,
          Eigen::Index fan_in = 1) {
    specs.push_back({std::move(name), rows, cols, init, fan_in});
    return static_cast<int>(specs.size() - 1);
  }
};

struct DenoiserParams {
  ArchConfig arch;
  ParamArrays arrays;  // in ParamLayout(arch) order

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& a : arrays) n += a.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& a : arrays)
      if (!a.allFinite()) return false;
    return true;
  }

  const Matrix& operator[](const std::string& name) const { return arrays.at(slot(name)); }
  Matrix& operator[](const std::string& name) { return arrays.at(slot(name)); }

  std::size_t slot(const std::string& name) const {
    const ParamLayout layout(arch);
    for (std::size_t i = 0; i < layout.specs.size(); ++i)
      if (layout.specs[i].name == name) return i;
    throw InvalidArgument("DenoiserParams: no array named '" + name + "'");
  }
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and norm shifts zero;
/// norm gains one; the output projection zero.
inline DenoiserParams init_params(const ArchConfig& arch) {
  arch.validate();
  const ParamLayout layout(arch);
  Rng rng(arch.seed);
  DenoiserParams p{arch, {}};
  p.arrays.reserve(layout.size());
  for (const auto& spec : layout.specs) {
    Matrix m(spec.rows, spec.cols);
    switch (spec.init) {
      case ParamInit::Zero: m.setZero(); break;
      case ParamInit::One: m.setOnes(); break;
      case ParamInit::Uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
          for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
        break;
      }
    }
    p.arrays.push_back(std::move(m));
  }
  return p;
}

/// Sinusoidal embedding: [sin(t w_0), cos(t w_0), sin(t w_1), ...] with
/// w_i = 10000^(-2i/dim).
inline RowVector timestep_embedding(double t, int dim) {
  require(dim >= 2 && dim % 2 == 0, "timestep_embedding: dim must be even and >= 2");
  RowVector e(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double omega = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
    e(2 * i) = std::sin(t * omega);
    e(2 * i + 1) = std::cos(t * omega);
  }
  return e;
}

/// Scale applied to w before its sinusoidal embedding.
inline constexpr double kGuidanceEmbeddingScale = 1000.0;

/// Counts per-sample network evaluations.
struct EvalCounter {
  std::int64_t count = 0;
};

/// A batch of B independent denoiser inputs.
struct DenoiserBatch {
  Matrix latents;                    // (B * latent_rows) x channel_dim
  Matrix conditions;                 // (B * condition_rows) x channel_dim
  std::vector<bool> null_condition;  // true: condition slots hold the null token
  std::vector<double> timesteps;
  std::vector<double> guidance;

  Eigen::Index size() const { return static_cast<Eigen::Index>(timesteps.size()); }

  void validate(const ArchConfig& a) const {
    const Eigen::Index b = size();
    require(b >= 1, "DenoiserBatch: empty batch");
    require(guidance.size() == timesteps.size() && null_condition.size() == timesteps.size(),
            "DenoiserBatch: per-sample vectors disagree in length");
    require(latents.rows() == b * a.latent_rows && latents.cols() == a.channel_dim,
            "DenoiserBatch: latents must be (B*" + std::to_string(a.latent_rows) + ") x " +
                std::to_string(a.channel_dim));
    require(conditions.rows() == b * a.condition_rows && conditions.cols() == a.channel_dim,
            "DenoiserBatch: conditions must be (B*" + std::to_string(a.condition_rows) + ") x " +
                std::to_string(a.channel_dim));
    for (double w : guidance) require(std::isfinite(w), "DenoiserBatch: guidance must be finite");
  }
};

/// Binds every parameter array as a tape leaf, in slot order.
inline std::vector<ad::Var> bind_parameters(ad::Tape& tape, const DenoiserParams& p) {
  std::vector<ad::Var> leaves;
  leaves.reserve(p.arrays.size());
  for (std::size_t i = 0; i < p.arrays.size(); ++i)
    leaves.push_back(tape.parameter(p.arrays[i], static_cast<int>(i)));
  return leaves;
}

/// Records the forward pass on `tape`; returns the (B * latent_rows) x
/// channel_dim prediction node.
inline ad::Var denoiser_forward(ad::Tape& tape, const DenoiserParams& p,
                                const std::vector<ad::Var>& leaf, const DenoiserBatch& batch,
                                EvalCounter* counter = nullptr) {
  const ArchConfig& a = p.arch;
  batch.validate(a);
  const ParamLayout L(a);
  require(leaf.size() == L.size(), "denoiser_forward: parameter binding size mismatch");
  const Eigen::Index B = batch.size();
  const Eigen::Index T = a.token_count();
  const auto P = [&](int slot) { return leaf[static_cast<std::size_t>(slot)]; };

  ad::Var tokens = tape.assemble_tokens(batch.latents, a.latent_rows, batch.conditions,
                                        a.condition_rows, batch.null_condition, P(L.null_token));
  ad::Var h = tape.linear(tokens, P(L.in_w), P(L.in_b));
  h = tape.add_tiled(h, P(L.pos));
  std::vector<Eigen::Index> segment(static_cast<std::size_t>(T), 1);
  std::fill(segment.begin(), segment.begin() + a.latent_rows, 0);
  h = tape.add_tiled(h, tape.gather_rows(P(L.seg), std::move(segment)));

  Matrix t_sin(B, a.model_dim);
  Matrix w_sin(B, a.model_dim);
  for (Eigen::Index b = 0; b < B; ++b) {
    t_sin.row(b) = timestep_embedding(batch.timesteps[static_cast<std::size_t>(b)], a.model_dim);
    w_sin.row(b) = timestep_embedding(
        kGuidanceEmbeddingScale * batch.guidance[static_cast<std::size_t>(b)], a.model_dim);
  }
  ad::Var t_emb = tape.linear(
      tape.silu(tape.linear(tape.constant(std::move(t_sin)), P(L.time1_w), P(L.time1_b))),
      P(L.time2_w), P(L.time2_b));
  ad::Var w_emb = tape.linear(
      tape.silu(tape.linear(tape.constant(std::move(w_sin)), P(L.guide1_w), P(L.guide1_b))),
      P(L.guide2_w), P(L.guide2_b));
  h = tape.add_grouped(h, tape.add(t_emb, w_emb), T);

  for (const BlockSlots& s : L.blocks) {
    ad::Var x = tape.layer_norm(h, P(s.ln1_gain), P(s.ln1_bias));
    ad::Var q = tape.linear(x, P(s.q_w), P(s.q_b));
    ad::Var k = tape.linear(x, P(s.k_w), P(s.k_b));
    ad::Var v = tape.linear(x, P(s.v_w), P(s.v_b));
    ad::Var att = tape.attention(q, k, v, T, a.n_heads);
    h = tape.add(h, tape.linear(att, P(s.o_w), P(s.o_b)));
    x = tape.layer_norm(h, P(s.ln2_gain), P(s.ln2_bias));
    ad::Var f = tape.linear(tape.gelu(tape.linear(x, P(s.ff1_w), P(s.ff1_b))), P(s.ff2_w),
                            P(s.ff2_b));
    h = tape.add(h, f);
  }
  ad::Var lead = tape.take_leading_rows(h, T, a.latent_rows);
  if (counter != nullptr) counter->count += B;
  return tape.linear(lead, P(L.out_w), P(L.out_b));
}

/// Gradient-free evaluation.
inline Matrix denoiser_forward(const DenoiserParams& p, const DenoiserBatch& batch,
                               EvalCounter* counter = nullptr) {
  ad::Tape tape(false);
  const auto leaves = bind_parameters(tape, p);
  return tape.value(denoiser_forward(tape, p, leaves, batch, counter));
}

/// Batch of one sample; `condition == nullptr` selects the null condition.
inline DenoiserBatch single_batch(const Matrix& latent, double t, double w, const Matrix* condition,
                                  const ArchConfig& a) {
  DenoiserBatch b;
  b.latents = latent;
  b.conditions = condition != nullptr ? *condition : Matrix::Zero(a.condition_rows, a.channel_dim);
  b.null_condition = {condition == nullptr};
  b.timesteps = {t};
  b.guidance = {w};
  return b;
}

}  // namespace humancm
