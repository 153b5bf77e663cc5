#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vlab/tensor.hpp"

namespace vlab {

enum class FusionMode { kBaseline, kVisAlign };

inline const char* fusion_name(FusionMode m) {
  return m == FusionMode::kBaseline ? "baseline" : "visalign";
}
FusionMode parse_fusion(const std::string& s);

struct ModelConfig {
  int d_t = 64;       // text embedding width
  int d_v = 32;       // visual feature width
  int layers = 4;
  int heads = 4;
  int vocab = 64;
  int max_seq = 128;
  int n_v = 16;       // visual token count
  FusionMode fusion = FusionMode::kBaseline;
  // Top d_t x d_t block of W_d starts as identity (visalign reduces exactly
  // to the baseline at init); set false for a pure gaussian init ablation.
  bool identity_top_wd = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Which sequence positions hold text vs visual rows. The visual block is
// contiguous: text [0,k), visual [k, k+n_v), text [k+n_v, n_t+n_v).
struct SequenceLayout {
  int k = 0;
  int n_t = 0;
  int n_v = 0;

  int total() const { return n_t + n_v; }
  int visual_begin() const { return k; }
  int visual_end() const { return k + n_v; }
  bool is_visual(int pos) const { return pos >= k && pos < k + n_v; }
  // Sequence position of text token index ti.
  int pos_of_text(int ti) const { return ti < k ? ti : ti + n_v; }

  bool operator==(const SequenceLayout&) const = default;
};

template <typename T>
struct FusedInputT {
  Tensor<T> embeddings;  // (n_t + n_v) x d_t
  SequenceLayout layout;
};

// Post-softmax attention weights captured from one forward pass,
// [layer][head][query][key] row-major.
struct AttentionRecord {
  int layers = 0;
  int heads = 0;
  int seq = 0;
  SequenceLayout layout;
  std::vector<float> weights;

  size_t index(int l, int h, int q, int k) const {
    return ((size_t(l) * heads + h) * seq + q) * seq + k;
  }
  float at(int l, int h, int q, int k) const { return weights[index(l, h, q, k)]; }

  // Enforces the causal-capture invariants: exact zeros above the diagonal,
  // each row summing to 1 within 1e-5. Throws DataError otherwise.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Fusion front-end ops. These are free functions so the contract is usable
// on raw tensors in tests; the model calls the same code.
// ---------------------------------------------------------------------------

// V_proj = V * W_p. v is n_v x d_v, w_p is d_v x d_t.
template <typename T>
Tensor<T> project_visual(Tape<T>& tape, const Tensor<T>& v, const Tensor<T>& w_p) {
  if (v.cols() != w_p.rows()) {
    throw ConfigError("project_visual: visual width " + shape_str(v.rows(), v.cols()) +
                      " does not match projection " + shape_str(w_p.rows(), w_p.cols()));
  }
  return tape.matmul(v, w_p);
}

// Average pooling over the projected visual rows: 1 x d_t.
template <typename T>
Tensor<T> pool_visual(Tape<T>& tape, const Tensor<T>& v_proj) {
  return tape.mean_rows(v_proj);
}

// Per-token fusion: row i of the result is [text_i | v_hat] * W_d.
// text is n_t x d_t, v_hat is 1 x d_t, w_d is 2*d_t x d_t.
template <typename T>
Tensor<T> visalign_fuse(Tape<T>& tape, const Tensor<T>& text, const Tensor<T>& v_hat,
                        const Tensor<T>& w_d) {
  const int d_t = text.cols();
  if (v_hat.rows() != 1 || v_hat.cols() != d_t) {
    throw ConfigError("visalign_fuse: pooled visual shape " +
                      shape_str(v_hat.rows(), v_hat.cols()) + " must be 1x" +
                      std::to_string(d_t));
  }
  if (w_d.rows() != 2 * d_t || w_d.cols() != d_t) {
    throw ConfigError("visalign_fuse: W_d shape " + shape_str(w_d.rows(), w_d.cols()) +
                      " must be " + shape_str(2 * d_t, d_t));
  }
  Tensor<T> tiled = tape.repeat_rows(v_hat, text.rows());
  Tensor<T> fused = tape.concat_features(text, tiled);
  return tape.matmul(fused, w_d);
}

inline std::vector<int> iota_ids(int from, int to) {
  std::vector<int> ids(size_t(to - from));
  for (int i = from; i < to; ++i) ids[size_t(i - from)] = i;
  return ids;
}

// Interleave text and visual rows: text [0,k), all visual rows, text [k,n_t).
template <typename T>
FusedInputT<T> assemble_sequence(Tape<T>& tape, const Tensor<T>& text,
                                 const Tensor<T>& v_proj, int k) {
  const int n_t = text.rows();
  const int n_v = v_proj.rows();
  if (k < 0 || k > n_t) {
    throw ShapeError("assemble_sequence: split index " + std::to_string(k) +
                     " out of range [0, " + std::to_string(n_t) + "]");
  }
  if (n_v > 0 && v_proj.cols() != text.cols()) {
    throw ShapeError("assemble_sequence: widths differ: " + shape_str(n_t, text.cols()) +
                     " vs " + shape_str(n_v, v_proj.cols()));
  }
  std::vector<Tensor<T>> parts;
  if (k > 0) parts.push_back(tape.gather_rows(text, iota_ids(0, k)));
  if (n_v > 0) parts.push_back(v_proj);
  if (k < n_t) parts.push_back(tape.gather_rows(text, iota_ids(k, n_t)));
  FusedInputT<T> out;
  out.embeddings = parts.size() == 1 ? parts.front() : tape.concat_rows(parts);
  out.layout = SequenceLayout{k, n_t, n_v};
  return out;
}

// yes iff logit[yes_id] > logit[no_id]; exact ties resolve to no.
template <typename T>
bool decode_answer(std::span<const T> last_logits, int yes_id, int no_id) {
  if (yes_id == no_id || yes_id < 0 || no_id < 0 || yes_id >= int(last_logits.size()) ||
      no_id >= int(last_logits.size())) {
    throw IndexError("decode_answer: bad answer ids " + std::to_string(yes_id) + ", " +
                     std::to_string(no_id));
  }
  return last_logits[yes_id] > last_logits[no_id];
}

// ---------------------------------------------------------------------------
// Decoder-only causal transformer with pre-norm blocks. Position embeddings
// are added after fusion/assembly so both fusion modes see identical
// positional treatment.
// ---------------------------------------------------------------------------
template <typename T>
struct ModelT {
  struct Block {
    Tensor<T> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2;
  };

  ModelConfig cfg;
  Tensor<T> emb;   // vocab x d_t
  Tensor<T> pos;   // max_seq x d_t
  Tensor<T> w_p;   // d_v x d_t
  Tensor<T> w_d;   // 2*d_t x d_t, visalign only (empty otherwise)
  std::vector<Block> blocks;
  Tensor<T> lnf_g, lnf_b;
  Tensor<T> head;  // d_t x vocab

  static ModelT init(const ModelConfig& cfg, uint64_t seed);

  // Canonical parameter order; checkpoint and optimizer layouts follow it.
  std::vector<std::pair<std::string, Tensor<T>*>> named_params();
  std::vector<std::pair<std::string, const Tensor<T>*>> named_params() const;

  // Fresh tensor nodes over shared storage. Gradients land on the alias, so
  // independent tapes (one per sample) can run concurrently. `trainable`
  // selects which parameters require gradients; nullptr means all.
  ModelT alias(const std::set<std::string>* trainable = nullptr) const;

  // Build the model input from frozen visual features and text token ids.
  FusedInputT<T> fuse(Tape<T>& tape, const Tensor<T>& visual_features,
                      const std::vector<int>& text_tokens, int k) const;

  struct Forward {
    Tensor<T> logits;  // S x vocab
    std::optional<AttentionRecord> attention;
  };
  Forward forward(Tape<T>& tape, const FusedInputT<T>& input,
                  bool capture_attention = false) const;
};

using Model = ModelT<float>;
using FusedInput = FusedInputT<float>;

// --------------------------- implementation -------------------------------

template <typename T>
ModelT<T> ModelT<T>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelT<T> m;
  m.cfg = cfg;
  constexpr T kStd = T(0.02);
  // Every parameter draws from its own named stream, so baseline and
  // visalign models share identical weights for every shared name.
  auto randn = [&](const std::string& name, int r, int c) {
    Rng rng(seed, Rng::stream(name));
    return Tensor<T>::randn(r, c, rng, kStd);
  };
  auto constant = [&](int r, int c, T v) {
    Tensor<T> t(r, c);
    for (auto& x : t.values_mut()) x = v;
    return t;
  };
  m.emb = randn("emb", cfg.vocab, cfg.d_t);
  m.pos = randn("pos", cfg.max_seq, cfg.d_t);
  m.w_p = randn("w_p", cfg.d_v, cfg.d_t);
  if (cfg.fusion == FusionMode::kVisAlign) {
    if (cfg.identity_top_wd) {
      m.w_d = Tensor<T>(2 * cfg.d_t, cfg.d_t);
      for (int i = 0; i < cfg.d_t; ++i) m.w_d.set(i, i, T(1));
      Rng rng(seed, Rng::stream("w_d"));
      for (int i = cfg.d_t; i < 2 * cfg.d_t; ++i) {
        for (int j = 0; j < cfg.d_t; ++j) m.w_d.set(i, j, T(rng.gaussian()) * kStd);
      }
    } else {
      m.w_d = randn("w_d", 2 * cfg.d_t, cfg.d_t);
    }
  }
  m.blocks.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    auto& b = m.blocks[l];
    const std::string p = "layer" + std::to_string(l) + "/";
    b.ln1_g = constant(1, cfg.d_t, T(1));
    b.ln1_b = constant(1, cfg.d_t, T(0));
    b.wq = randn(p + "wq", cfg.d_t, cfg.d_t);
    b.wk = randn(p + "wk", cfg.d_t, cfg.d_t);
    b.wv = randn(p + "wv", cfg.d_t, cfg.d_t);
    b.wo = randn(p + "wo", cfg.d_t, cfg.d_t);
    b.ln2_g = constant(1, cfg.d_t, T(1));
    b.ln2_b = constant(1, cfg.d_t, T(0));
    b.w1 = randn(p + "w1", cfg.d_t, 4 * cfg.d_t);
    b.w2 = randn(p + "w2", 4 * cfg.d_t, cfg.d_t);
  }
  m.lnf_g = constant(1, cfg.d_t, T(1));
  m.lnf_b = constant(1, cfg.d_t, T(0));
  m.head = randn("head", cfg.d_t, cfg.vocab);
  return m;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelT<T>::named_params() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("emb", &emb);
  out.emplace_back("pos", &pos);
  out.emplace_back("w_p", &w_p);
  if (cfg.fusion == FusionMode::kVisAlign) out.emplace_back("w_d", &w_d);
  for (size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = "layer" + std::to_string(l) + "/";
    out.emplace_back(p + "ln1_g", &b.ln1_g);
    out.emplace_back(p + "ln1_b", &b.ln1_b);
    out.emplace_back(p + "wq", &b.wq);
    out.emplace_back(p + "wk", &b.wk);
    out.emplace_back(p + "wv", &b.wv);
    out.emplace_back(p + "wo", &b.wo);
    out.emplace_back(p + "ln2_g", &b.ln2_g);
    out.emplace_back(p + "ln2_b", &b.ln2_b);
    out.emplace_back(p + "w1", &b.w1);
    out.emplace_back(p + "w2", &b.w2);
  }
  out.emplace_back("lnf_g", &lnf_g);
  out.emplace_back("lnf_b", &lnf_b);
  out.emplace_back("head", &head);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelT<T>::named_params() const {
  auto mut = const_cast<ModelT<T>*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

template <typename T>
ModelT<T> ModelT<T>::alias(const std::set<std::string>* trainable) const {
  ModelT<T> m = *this;  // copies tensor handles; re-point them below
  auto src = named_params();
  auto dst = m.named_params();
  for (size_t i = 0; i < src.size(); ++i) {
    const bool rg = trainable == nullptr || trainable->count(src[i].first) > 0;
    *dst[i].second = src[i].second->alias(rg);
  }
  return m;
}

template <typename T>
FusedInputT<T> ModelT<T>::fuse(Tape<T>& tape, const Tensor<T>& visual_features,
                               const std::vector<int>& text_tokens, int k) const {
  if (visual_features.rows() != cfg.n_v || visual_features.cols() != cfg.d_v) {
    throw ConfigError("fuse: visual features " +
                      shape_str(visual_features.rows(), visual_features.cols()) +
                      " do not match config " + shape_str(cfg.n_v, cfg.d_v));
  }
  Tensor<T> text = tape.embedding_lookup(emb, text_tokens);
  Tensor<T> v_proj = project_visual(tape, visual_features, w_p);
  if (cfg.fusion == FusionMode::kVisAlign) {
    Tensor<T> v_hat = pool_visual(tape, v_proj);
    text = visalign_fuse(tape, text, v_hat, w_d);
  }
  return assemble_sequence(tape, text, v_proj, k);
}

template <typename T>
typename ModelT<T>::Forward ModelT<T>::forward(Tape<T>& tape, const FusedInputT<T>& input,
                                               bool capture_attention) const {
  const int s = input.embeddings.rows();
  if (s > cfg.max_seq) {
    throw CapacityError("sequence length " + std::to_string(s) +
                        " exceeds model capacity " + std::to_string(cfg.max_seq));
  }
  if (input.embeddings.cols() != cfg.d_t) {
    throw ShapeError("input width " + shape_str(s, input.embeddings.cols()) +
                     " does not match d_t " + std::to_string(cfg.d_t));
  }
  const int dh = cfg.d_t / cfg.heads;
  const Mask causal = Mask::causal(s);

  Forward out;
  if (capture_attention) {
    AttentionRecord rec;
    rec.layers = cfg.layers;
    rec.heads = cfg.heads;
    rec.seq = s;
    rec.layout = input.layout;
    rec.weights.assign(size_t(cfg.layers) * cfg.heads * s * s, 0.0f);
    out.attention = std::move(rec);
  }

  Tensor<T> x = tape.add(input.embeddings, tape.gather_rows(pos, iota_ids(0, s)));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& b = blocks[l];
    Tensor<T> h = tape.layer_norm_rows(x, b.ln1_g, b.ln1_b);
    Tensor<T> q = tape.matmul(h, b.wq);
    Tensor<T> kk = tape.matmul(h, b.wk);
    Tensor<T> v = tape.matmul(h, b.wv);
    Tensor<T> merged;
    for (int hh = 0; hh < cfg.heads; ++hh) {
      Tensor<T> qh = tape.slice_cols(q, hh * dh, (hh + 1) * dh);
      Tensor<T> kh = tape.slice_cols(kk, hh * dh, (hh + 1) * dh);
      Tensor<T> vh = tape.slice_cols(v, hh * dh, (hh + 1) * dh);
      Tensor<T> scores = tape.scale(tape.matmul_nt(qh, kh), T(1.0 / std::sqrt(double(dh))));
      Tensor<T> probs = tape.softmax_rows(scores, &causal);
      if (out.attention) {
        auto pv = probs.values();
        float* dst = out.attention->weights.data() + out.attention->index(l, hh, 0, 0);
        for (size_t i = 0; i < pv.size(); ++i) dst[i] = float(pv[i]);
      }
      Tensor<T> oh = tape.matmul(probs, vh);
      merged = hh == 0 ? oh : tape.concat_features(merged, oh);
    }
    x = tape.add(x, tape.matmul(merged, b.wo));
    Tensor<T> h2 = tape.layer_norm_rows(x, b.ln2_g, b.ln2_b);
    Tensor<T> ff = tape.matmul(tape.gelu(tape.matmul(h2, b.w1)), b.w2);
    x = tape.add(x, ff);
  }
  x = tape.layer_norm_rows(x, lnf_g, lnf_b);
  out.logits = tape.matmul(x, head);
  return out;
}

}  // namespace vlab
