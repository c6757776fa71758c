#pragma once

// Miniature dual encoder (image + text branch) built from pre-LN
// transformer blocks, with layer-wise prompt replacement.
//
// Image sequence: [CLS, patch_0 .. patch_{P-1}, prompt_0 .. prompt_{M-1}]
// Text sequence:  [prompt_0 .. prompt_{M-1}, prefix.., name_0 .. name_{n-1}]
//
// At layer 1 the prompt slots hold the branch's input prompt p1. At every
// layer in replace_layers the slots are overwritten before attention:
// unshared mode feeds separate P_Q/P_K/P_V into the query, key and value
// streams; shared mode overwrites with a single prompt.

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpp/tensor.hpp"

namespace rpp {

enum class Branch { kImage, kText };
const char* branch_name(Branch b);

struct EncoderConfig {
  std::size_t depth = 4;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t embed_dim = 32;
  std::size_t prompt_len = 4;
  std::vector<std::size_t> replace_layers{2, 3, 4};  // 1-based layer ids
  bool shared_qkv = false;

  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::size_t patch_vocab = 32;
  std::size_t text_vocab = 64;
  std::size_t name_len = 3;
  std::size_t text_prefix_len = 0;  // template tokens ahead of the name

  double ln_eps = 1e-5;
  double prompt_init_std = 0.02;

  std::size_t patches() const { return grid_h * grid_w; }
  std::size_t image_seq_len() const { return 1 + patches() + prompt_len; }
  std::size_t text_tokens() const { return text_prefix_len + name_len; }
  std::size_t text_seq_len() const { return prompt_len + text_tokens(); }
  bool replaces_at(std::size_t layer) const;

  // Throws kConfig on a violated invariant.
  void validate() const;

  // replace_layers = {2..depth}
  static std::vector<std::size_t> all_deep_layers(std::size_t depth);
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct BranchParams {
  Tensor token_embed;  // [vocab, d]
  Tensor pos_embed;    // image: [1 + P, d]; text: [prefix + name, d]
  Tensor cls;          // image only: [1, d]
  std::vector<BlockParams> blocks;
  Tensor ln_post_g, ln_post_b;
  Tensor proj;  // [d, embed_dim]
};

// Frozen-by-default transformer weights for both branches.
struct Backbone {
  BranchParams image;
  BranchParams text;

  static Backbone init(const EncoderConfig& cfg, std::mt19937_64& rng);
  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_trainable(bool on);
  std::size_t parameter_count() const;
};

struct LayerPrompts {
  Tensor q, k, v;  // unshared
  Tensor shared;   // shared_qkv mode
};

struct BranchPrompts {
  Tensor p1;  // [M, d]
  std::map<std::size_t, LayerPrompts> layers;
};

// The trainable prompt parameters of both branches.
struct PromptBank {
  BranchPrompts image;
  BranchPrompts text;

  static PromptBank init(const EncoderConfig& cfg, std::mt19937_64& rng);
  static PromptBank zeros(const EncoderConfig& cfg);

  const BranchPrompts& branch(Branch b) const { return b == Branch::kImage ? image : text; }
  BranchPrompts& branch(Branch b) { return b == Branch::kImage ? image : text; }

  // Names follow branch.layer.{p1|pq|pk|pv|p}, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;
  PromptBank clone() const;  // deep copy of values, trainable
  bool empty() const { return !image.p1.defined() && !text.p1.defined(); }
};

// Σ_branches [M·d + |R|·3·M·d] for unshared; shared mode uses M·d per layer.
std::size_t expected_prompt_parameters(const EncoderConfig& cfg);
// Prompt parameters at replacement layers only (the SAPL budget).
std::size_t replacement_prompt_parameters(const EncoderConfig& cfg);

struct SequenceState {
  Tensor x;  // [B, S, d]
  std::size_t prompt_start = 0;
  std::size_t prompt_len = 0;
};

SequenceState rep(const SequenceState& state, const Tensor& prompt);

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const BlockParams& p,
                            std::size_t heads);

// x + MHSA(LN(x)), then + MLP(LN(.)).
SequenceState standard_block_forward(const SequenceState& state, const BlockParams& p, std::size_t heads,
                                     double ln_eps);
// Rep with one prompt, then a standard block.
SequenceState shared_block_forward(const SequenceState& state, const Tensor& prompt, const BlockParams& p,
                                   std::size_t heads, double ln_eps);
// X_Q = Rep(X, P_Q); X_{Q,K,V}* = LN(Rep(X, P_{Q,K,V})) with the block's
// own pre-attention LN; X^ = X_Q + MHSA(X_Q*, X_K*, X_V*);
// X = X^ + MLP(LN(X^)).
SequenceState sapl_block_forward(const SequenceState& state, const Tensor& pq, const Tensor& pk, const Tensor& pv,
                                 const BlockParams& p, std::size_t heads, double ln_eps);

class DualEncoder {
 public:
  DualEncoder(EncoderConfig cfg, Backbone backbone);

  const EncoderConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone() { return backbone_; }

  // patch ids laid out [batch, H*W] -> unit-norm rows [batch, embed_dim].
  Tensor encode_images(std::span<const int> patch_ids, std::size_t batch, const PromptBank* prompts) const;
  // token ids laid out [count, text_tokens()] -> unit-norm rows.
  Tensor encode_texts(std::span<const int> token_ids, std::size_t count, const PromptBank* prompts) const;

 private:
  SequenceState run_blocks(SequenceState state, const BranchParams& branch, const BranchPrompts* prompts) const;

  EncoderConfig cfg_;
  Backbone backbone_;
};

// Softmax over cosine similarity / tau. image [N, e], classes [C, e] -> [N, C].
Tensor clip_logits(const Tensor& image_embeds, const Tensor& class_embeds, double tau);
Tensor clip_probs(const Tensor& image_embeds, const Tensor& class_embeds, double tau);

}  // namespace rpp
