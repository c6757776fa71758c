#include "rpp/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "rpp/error.hpp"

namespace rpp {

const char* branch_name(Branch b) { return b == Branch::kImage ? "image" : "text"; }

bool EncoderConfig::replaces_at(std::size_t layer) const {
  return std::find(replace_layers.begin(), replace_layers.end(), layer) != replace_layers.end();
}

void EncoderConfig::validate() const {
  require(depth >= 1, ErrorKind::kConfig, "depth must be >= 1");
  require(dim >= 1 && heads >= 1 && dim % heads == 0, ErrorKind::kConfig,
          "dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  require(mlp_ratio >= 1 && embed_dim >= 1, ErrorKind::kConfig, "mlp_ratio and embed_dim must be >= 1");
  for (std::size_t l : replace_layers) {
    require(l >= 2 && l <= depth, ErrorKind::kConfig,
            "replace layer " + std::to_string(l) + " outside {2.." + std::to_string(depth) + "}");
  }
  require(!(prompt_len == 0 && !replace_layers.empty()), ErrorKind::kConfig,
          "replace_layers set but prompt_len is 0");
  require(grid_h >= 1 && grid_w >= 1 && patch_vocab >= 2, ErrorKind::kConfig, "bad patch grid or vocab");
  require(text_vocab >= 2 && name_len >= 1, ErrorKind::kConfig, "bad text vocab or name length");
  require(ln_eps > 0.0, ErrorKind::kConfig, "ln_eps must be positive");
}

std::vector<std::size_t> EncoderConfig::all_deep_layers(std::size_t depth) {
  std::vector<std::size_t> out;
  for (std::size_t l = 2; l <= depth; ++l) out.push_back(l);
  return out;
}

// ---- parameters ------------------------------------------------------------

namespace {

Tensor weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return Tensor::randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

BranchParams init_branch(const EncoderConfig& cfg, std::size_t vocab, std::size_t positions, bool with_cls,
                         std::mt19937_64& rng) {
  const std::size_t d = cfg.dim, hidden = cfg.dim * cfg.mlp_ratio;
  BranchParams b;
  b.token_embed = Tensor::randn({vocab, d}, 1.0, rng);
  b.pos_embed = Tensor::randn({positions, d}, 0.1, rng);
  if (with_cls) b.cls = Tensor::randn({1, d}, 1.0, rng);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    BlockParams p;
    p.ln1_g = Tensor::full({d}, 1.0);
    p.ln1_b = Tensor::zeros({d});
    p.wq = weight(d, d, rng);
    p.bq = Tensor::zeros({d});
    p.wk = weight(d, d, rng);
    p.bk = Tensor::zeros({d});
    p.wv = weight(d, d, rng);
    p.bv = Tensor::zeros({d});
    p.wo = weight(d, d, rng);
    p.bo = Tensor::zeros({d});
    p.ln2_g = Tensor::full({d}, 1.0);
    p.ln2_b = Tensor::zeros({d});
    p.w1 = weight(d, hidden, rng);
    p.b1 = Tensor::zeros({hidden});
    p.w2 = weight(hidden, d, rng);
    p.b2 = Tensor::zeros({d});
    b.blocks.push_back(std::move(p));
  }
  b.ln_post_g = Tensor::full({d}, 1.0);
  b.ln_post_b = Tensor::zeros({d});
  b.proj = weight(d, cfg.embed_dim, rng);
  return b;
}

void append_branch(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                   const BranchParams& b) {
  out.emplace_back(prefix + ".token_embed", b.token_embed);
  out.emplace_back(prefix + ".pos_embed", b.pos_embed);
  if (b.cls.defined()) out.emplace_back(prefix + ".cls", b.cls);
  for (std::size_t l = 0; l < b.blocks.size(); ++l) {
    const BlockParams& p = b.blocks[l];
    const std::string s = prefix + ".blocks." + std::to_string(l) + ".";
    for (const auto& [name, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"ln1_g", &p.ln1_g}, {"ln1_b", &p.ln1_b}, {"wq", &p.wq}, {"bq", &p.bq}, {"wk", &p.wk},
             {"bk", &p.bk},       {"wv", &p.wv},       {"bv", &p.bv}, {"wo", &p.wo}, {"bo", &p.bo},
             {"ln2_g", &p.ln2_g}, {"ln2_b", &p.ln2_b}, {"w1", &p.w1}, {"b1", &p.b1}, {"w2", &p.w2},
             {"b2", &p.b2}}) {
      out.emplace_back(s + name, *t);
    }
  }
  out.emplace_back(prefix + ".ln_post_g", b.ln_post_g);
  out.emplace_back(prefix + ".ln_post_b", b.ln_post_b);
  out.emplace_back(prefix + ".proj", b.proj);
}

BranchPrompts init_prompts(const EncoderConfig& cfg, std::mt19937_64* rng) {
  BranchPrompts bp;
  if (cfg.prompt_len == 0) return bp;
  const Shape shape{cfg.prompt_len, cfg.dim};
  auto make = [&] {
    return rng ? Tensor::randn(shape, cfg.prompt_init_std, *rng, true) : Tensor::zeros(shape, true);
  };
  bp.p1 = make();
  for (std::size_t l : cfg.replace_layers) {
    LayerPrompts lp;
    if (cfg.shared_qkv) {
      lp.shared = make();
    } else {
      lp.q = make();
      lp.k = make();
      lp.v = make();
    }
    bp.layers.emplace(l, std::move(lp));
  }
  return bp;
}

void append_prompts(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                    const BranchPrompts& bp) {
  if (!bp.p1.defined()) return;
  out.emplace_back(prefix + ".1.p1", bp.p1);
  for (const auto& [layer, lp] : bp.layers) {
    const std::string s = prefix + "." + std::to_string(layer) + ".";
    if (lp.shared.defined()) {
      out.emplace_back(s + "p", lp.shared);
    } else {
      out.emplace_back(s + "pq", lp.q);
      out.emplace_back(s + "pk", lp.k);
      out.emplace_back(s + "pv", lp.v);
    }
  }
}

Tensor clone_trainable(const Tensor& t) {
  if (!t.defined()) return t;
  Tensor c = t.detach();
  c.set_requires_grad(true);
  return c;
}

}  // namespace

Backbone Backbone::init(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Backbone bb;
  bb.image = init_branch(cfg, cfg.patch_vocab, 1 + cfg.patches(), true, rng);
  bb.text = init_branch(cfg, cfg.text_vocab, cfg.text_tokens(), false, rng);
  return bb;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  append_branch(out, "image", image);
  append_branch(out, "text", text);
  return out;
}

void Backbone::set_trainable(bool on) {
  for (auto& [name, t] : named()) t.set_requires_grad(on);
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

PromptBank PromptBank::init(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  PromptBank pb;
  pb.image = init_prompts(cfg, &rng);
  pb.text = init_prompts(cfg, &rng);
  return pb;
}

PromptBank PromptBank::zeros(const EncoderConfig& cfg) {
  PromptBank pb;
  pb.image = init_prompts(cfg, nullptr);
  pb.text = init_prompts(cfg, nullptr);
  return pb;
}

std::vector<std::pair<std::string, Tensor>> PromptBank::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  append_prompts(out, "image", image);
  append_prompts(out, "text", text);
  return out;
}

std::vector<Tensor> PromptBank::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::size_t PromptBank::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

PromptBank PromptBank::clone() const {
  PromptBank c;
  for (Branch b : {Branch::kImage, Branch::kText}) {
    const BranchPrompts& src = branch(b);
    BranchPrompts& dst = c.branch(b);
    dst.p1 = clone_trainable(src.p1);
    for (const auto& [layer, lp] : src.layers) {
      dst.layers.emplace(layer, LayerPrompts{clone_trainable(lp.q), clone_trainable(lp.k), clone_trainable(lp.v),
                                             clone_trainable(lp.shared)});
    }
  }
  return c;
}

std::size_t expected_prompt_parameters(const EncoderConfig& cfg) {
  const std::size_t md = cfg.prompt_len * cfg.dim;
  const std::size_t per_layer = cfg.shared_qkv ? md : 3 * md;
  return 2 * (md + cfg.replace_layers.size() * per_layer);
}

std::size_t replacement_prompt_parameters(const EncoderConfig& cfg) {
  const std::size_t md = cfg.prompt_len * cfg.dim;
  return 2 * cfg.replace_layers.size() * (cfg.shared_qkv ? md : 3 * md);
}

// ---- blocks ----------------------------------------------------------------

SequenceState rep(const SequenceState& state, const Tensor& prompt) {
  require(prompt.rank() == 2 && prompt.dim(0) == state.prompt_len, ErrorKind::kDimension,
          "rep: prompt " + shape_str(prompt.shape()) + " for " + std::to_string(state.prompt_len) + " slots");
  if (state.prompt_len == 0) return state;
  return {replace_rows(state.x, state.prompt_start, prompt), state.prompt_start, state.prompt_len};
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const BlockParams& p,
                            std::size_t heads) {
  const Tensor q = split_heads(add(matmul(q_in, p.wq), p.bq), heads);
  const Tensor k = split_heads(add(matmul(k_in, p.wk), p.bk), heads);
  const Tensor v = split_heads(add(matmul(v_in, p.wv), p.bv), heads);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  const Tensor attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dh));
  return add(matmul(merge_heads(matmul(attn, v)), p.wo), p.bo);
}

namespace {

Tensor mlp_residual(const Tensor& h, const BlockParams& p, double ln_eps) {
  const Tensor z = gelu(add(matmul(layer_norm(h, p.ln2_g, p.ln2_b, ln_eps), p.w1), p.b1));
  return add(h, add(matmul(z, p.w2), p.b2));
}

}  // namespace

SequenceState standard_block_forward(const SequenceState& state, const BlockParams& p, std::size_t heads,
                                     double ln_eps) {
  const Tensor n1 = layer_norm(state.x, p.ln1_g, p.ln1_b, ln_eps);
  const Tensor h = add(state.x, multi_head_attention(n1, n1, n1, p, heads));
  return {mlp_residual(h, p, ln_eps), state.prompt_start, state.prompt_len};
}

SequenceState shared_block_forward(const SequenceState& state, const Tensor& prompt, const BlockParams& p,
                                   std::size_t heads, double ln_eps) {
  return standard_block_forward(rep(state, prompt), p, heads, ln_eps);
}

SequenceState sapl_block_forward(const SequenceState& state, const Tensor& pq, const Tensor& pk, const Tensor& pv,
                                 const BlockParams& p, std::size_t heads, double ln_eps) {
  const Tensor xq = rep(state, pq).x;
  const Tensor xk = rep(state, pk).x;
  const Tensor xv = rep(state, pv).x;
  const Tensor nq = layer_norm(xq, p.ln1_g, p.ln1_b, ln_eps);
  const Tensor nk = layer_norm(xk, p.ln1_g, p.ln1_b, ln_eps);
  const Tensor nv = layer_norm(xv, p.ln1_g, p.ln1_b, ln_eps);
  const Tensor h = add(xq, multi_head_attention(nq, nk, nv, p, heads));
  return {mlp_residual(h, p, ln_eps), state.prompt_start, state.prompt_len};
}

// ---- dual encoder ----------------------------------------------------------

DualEncoder::DualEncoder(EncoderConfig cfg, Backbone backbone) : cfg_(std::move(cfg)), backbone_(std::move(backbone)) {
  cfg_.validate();
}

SequenceState DualEncoder::run_blocks(SequenceState state, const BranchParams& branch,
                                      const BranchPrompts* prompts) const {
  const bool prompted = prompts && cfg_.prompt_len > 0;
  if (prompted) state = rep(state, prompts->p1);
  for (std::size_t l = 1; l <= cfg_.depth; ++l) {
    const BlockParams& p = branch.blocks[l - 1];
    const LayerPrompts* lp = nullptr;
    if (prompted) {
      auto it = prompts->layers.find(l);
      if (it != prompts->layers.end()) lp = &it->second;
    }
    if (lp == nullptr) {
      state = standard_block_forward(state, p, cfg_.heads, cfg_.ln_eps);
    } else if (lp->shared.defined()) {
      state = shared_block_forward(state, lp->shared, p, cfg_.heads, cfg_.ln_eps);
    } else {
      state = sapl_block_forward(state, lp->q, lp->k, lp->v, p, cfg_.heads, cfg_.ln_eps);
    }
  }
  return state;
}

Tensor DualEncoder::encode_images(std::span<const int> patch_ids, std::size_t batch, const PromptBank* prompts) const {
  const std::size_t n_patch = cfg_.patches(), d = cfg_.dim, m = cfg_.prompt_len;
  require(batch > 0 && patch_ids.size() == batch * n_patch, ErrorKind::kDimension,
          "encode_images: " + std::to_string(patch_ids.size()) + " patch ids for " + std::to_string(batch) + " x " +
              std::to_string(n_patch) + " grid");
  require(m == 0 || prompts != nullptr, ErrorKind::kUsage, "encode_images: prompted config without prompt bank");
  for (int id : patch_ids) {
    require(id >= 0 && static_cast<std::size_t>(id) < cfg_.patch_vocab, ErrorKind::kInput,
            "patch id " + std::to_string(id) + " outside patch vocab");
  }
  const BranchParams& br = backbone_.image;
  Tensor tokens = reshape(embedding(br.token_embed, patch_ids), {batch, n_patch, d});
  tokens = add(tokens, slice(br.pos_embed, 0, 1, n_patch));
  const Tensor cls = add(Tensor::zeros({batch, 1, d}), add(br.cls, slice(br.pos_embed, 0, 0, 1)));
  std::vector<Tensor> parts{cls, tokens};
  if (m > 0) parts.push_back(Tensor::zeros({batch, m, d}));
  SequenceState state{concat(parts, 1), 1 + n_patch, m};
  state = run_blocks(std::move(state), br, prompts ? &prompts->image : nullptr);
  const Tensor head = reshape(slice(state.x, 1, 0, 1), {batch, d});
  return l2_normalize(matmul(layer_norm(head, br.ln_post_g, br.ln_post_b, cfg_.ln_eps), br.proj));
}

Tensor DualEncoder::encode_texts(std::span<const int> token_ids, std::size_t count, const PromptBank* prompts) const {
  const std::size_t t = cfg_.text_tokens(), d = cfg_.dim, m = cfg_.prompt_len;
  require(count > 0 && token_ids.size() == count * t, ErrorKind::kDimension,
          "encode_texts: " + std::to_string(token_ids.size()) + " token ids for " + std::to_string(count) + " x " +
              std::to_string(t));
  require(m == 0 || prompts != nullptr, ErrorKind::kUsage, "encode_texts: prompted config without prompt bank");
  const BranchParams& br = backbone_.text;
  Tensor tokens = add(reshape(embedding(br.token_embed, token_ids), {count, t, d}), br.pos_embed);
  std::vector<Tensor> parts;
  if (m > 0) parts.push_back(Tensor::zeros({count, m, d}));
  parts.push_back(tokens);
  SequenceState state{parts.size() == 1 ? tokens : concat(parts, 1), 0, m};
  state = run_blocks(std::move(state), br, prompts ? &prompts->text : nullptr);
  const Tensor last = reshape(slice(state.x, 1, cfg_.text_seq_len() - 1, 1), {count, d});
  return l2_normalize(matmul(layer_norm(last, br.ln_post_g, br.ln_post_b, cfg_.ln_eps), br.proj));
}

Tensor clip_logits(const Tensor& image_embeds, const Tensor& class_embeds, double tau) {
  require(tau > 0.0, ErrorKind::kConfig, "temperature must be positive");
  return scale(matmul(image_embeds, transpose(class_embeds)), 1.0 / tau);
}

Tensor clip_probs(const Tensor& image_embeds, const Tensor& class_embeds, double tau) {
  return softmax(clip_logits(image_embeds, class_embeds, tau));
}

}  // namespace rpp
