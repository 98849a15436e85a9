#include "mora/model.hpp"

#include <cmath>

#include "mora/random.hpp"

namespace mora {

void ModelConfig::validate() const {
  if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0)
    throw ConfigError("model.hidden_dim must be a positive multiple of model.num_heads");
  if (num_blocks < 1) throw ConfigError("model.num_blocks must be at least 1");
  if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio must be at least 1");
  if (vocab_size < 2) throw ConfigError("model.vocab_size must be at least 2");
  if (max_text_len < 1) throw ConfigError("model.max_text_len must be at least 1");
  if (image_grid < 1) throw ConfigError("model.image_grid must be at least 1");
  if (patch_dim < 1) throw ConfigError("model.patch_dim must be at least 1");
  if (num_labels < 1) throw ConfigError("model.num_labels must be at least 1");
  if (!(init_std > 0) || !(ln_eps > 0)) throw ConfigError("model.init_std and model.ln_eps must be positive");
  if (adapter.kind == AdapterKind::none) return;
  if (adapter.rank < 1) throw ConfigError("adapter.rank must be at least 1");
  if (adapter.rank > hidden_dim)
    throw ConfigError("adapter.rank " + std::to_string(adapter.rank) + " exceeds hidden_dim " +
                      std::to_string(hidden_dim));
  if (!(adapter.init_std > 0)) throw ConfigError("adapter.init_std must be positive");
  for (int b : adapter.target_blocks)
    if (b < 0 || b >= num_blocks)
      throw ConfigError("adapter.target_blocks contains " + std::to_string(b) + ", model has " +
                        std::to_string(num_blocks) + " blocks");
}

std::string adapter_key(AdapterKind kind, int block, Projection proj, const char* part) {
  return std::string(to_string(kind)) + "." + std::to_string(block) + "." + std::string(to_string(proj)) + "." + part;
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  const Index d = cfg.hidden_dim;
  const Index hidden = cfg.mlp_ratio * d;
  std::vector<ParamSpec> out;
  auto frozen = [&](std::string name, Index r, Index c) { out.push_back({std::move(name), r, c, false, false}); };

  frozen("embed.text", cfg.vocab_size, d);
  frozen("embed.patch.weight", d, cfg.patch_dim);
  frozen("embed.patch.bias", 1, d);
  frozen("embed.type", 2, d);
  frozen("embed.image_pos", cfg.num_patches(), d);
  frozen("embed.text_pos", cfg.max_text_len, d);
  frozen("embed.cls", 1, d);
  for (Index b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    frozen(p + "ln1.gain", 1, d);
    frozen(p + "ln1.bias", 1, d);
    for (const char* proj : {"query", "key", "value", "out"}) {
      frozen(p + "attn." + proj + ".weight", d, d);
      frozen(p + "attn." + proj + ".bias", 1, d);
    }
    frozen(p + "ln2.gain", 1, d);
    frozen(p + "ln2.bias", 1, d);
    frozen(p + "mlp.fc1.weight", hidden, d);
    frozen(p + "mlp.fc1.bias", 1, hidden);
    frozen(p + "mlp.fc2.weight", d, hidden);
    frozen(p + "mlp.fc2.bias", 1, d);
  }
  frozen("final_ln.gain", 1, d);
  frozen("final_ln.bias", 1, d);
  out.push_back({"classifier.fc1.weight", 2 * d, d, true, true});
  out.push_back({"classifier.fc1.bias", 1, 2 * d, true, false});
  out.push_back({"classifier.fc2.weight", cfg.num_labels, 2 * d, true, true});
  out.push_back({"classifier.fc2.bias", 1, cfg.num_labels, true, false});

  const AdapterConfig& ac = cfg.adapter;
  if (ac.kind != AdapterKind::none) {
    for (int b : ac.target_blocks) {
      for (Projection proj : ac.target_projections) {
        out.push_back({adapter_key(ac.kind, b, proj, "A"), ac.rank, d, true, true});
        if (ac.kind == AdapterKind::mora) {
          out.push_back({adapter_key(ac.kind, b, proj, "B_img"), d, ac.rank, true, true});
          out.push_back({adapter_key(ac.kind, b, proj, "B_txt"), d, ac.rank, true, true});
        } else {
          out.push_back({adapter_key(ac.kind, b, proj, "B"), d, ac.rank, true, true});
        }
      }
    }
  }
  return out;
}

ParamCounts count_params(const std::vector<ParamSpec>& layout) {
  ParamCounts c;
  for (const ParamSpec& p : layout) {
    c.total += p.rows * p.cols;
    if (p.trainable) c.trainable += p.rows * p.cols;
  }
  return c;
}

namespace {

Tensor gaussian(Rng& rng, Index rows, Index cols, double stddev, bool requires_grad) {
  Matrix m(rows, cols);
  fill_normal(m, rng, stddev);
  return Tensor(std::move(m), requires_grad);
}

Tensor fan_in_weight(Rng& rng, Index out, Index in) {
  return gaussian(rng, out, in, 1.0 / std::sqrt(static_cast<double>(in)), true);
}

Tensor constant_row(Index n, double value, bool requires_grad) {
  return Tensor(Matrix::Constant(1, n, value), requires_grad);
}

}  // namespace

MultimodalEncoder::MultimodalEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const Index d = cfg_.hidden_dim;
  const Index hidden = cfg_.mlp_ratio * d;

  // Embeddings are a fixed preprocessing stage and never carry gradients.
  Rng embed_rng(derive_seed(seed, "embed"));
  text_embedding_ = gaussian(embed_rng, cfg_.vocab_size, d, 1.0, false);
  patch_weight_ = gaussian(embed_rng, d, cfg_.patch_dim, 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim)), false);
  patch_bias_ = gaussian(embed_rng, 1, d, cfg_.init_std, false);
  type_embedding_ = gaussian(embed_rng, 2, d, cfg_.init_std, false);
  image_position_ = gaussian(embed_rng, cfg_.num_patches(), d, cfg_.init_std, false);
  text_position_ = gaussian(embed_rng, cfg_.max_text_len, d, cfg_.init_std, false);
  class_token_ = gaussian(embed_rng, 1, d, cfg_.init_std, false);

  for (Index b = 0; b < cfg_.num_blocks; ++b) {
    Rng rng(derive_seed(seed, "block", static_cast<std::uint64_t>(b)));
    Block blk;
    blk.ln1_gain = constant_row(d, 1.0, true);
    blk.ln1_bias = constant_row(d, 0.0, true);
    blk.wq = fan_in_weight(rng, d, d);
    blk.bq = constant_row(d, 0.0, true);
    blk.wk = fan_in_weight(rng, d, d);
    blk.bk = constant_row(d, 0.0, true);
    blk.wv = fan_in_weight(rng, d, d);
    blk.bv = constant_row(d, 0.0, true);
    blk.wo = fan_in_weight(rng, d, d);
    blk.bo = constant_row(d, 0.0, true);
    blk.ln2_gain = constant_row(d, 1.0, true);
    blk.ln2_bias = constant_row(d, 0.0, true);
    blk.w1 = fan_in_weight(rng, hidden, d);
    blk.b1 = constant_row(hidden, 0.0, true);
    blk.w2 = fan_in_weight(rng, d, hidden);
    blk.b2 = constant_row(d, 0.0, true);
    blocks_.push_back(std::move(blk));
  }
  final_gain_ = constant_row(d, 1.0, true);
  final_bias_ = constant_row(d, 0.0, true);

  Rng head_rng(derive_seed(seed, "classifier"));
  classifier_.w1 = fan_in_weight(head_rng, 2 * d, d);
  classifier_.b1 = constant_row(2 * d, 0.0, true);
  classifier_.w2 = fan_in_weight(head_rng, cfg_.num_labels, 2 * d);
  classifier_.b2 = constant_row(cfg_.num_labels, 0.0, true);

  const AdapterConfig& ac = cfg_.adapter;
  if (ac.kind != AdapterKind::none) {
    for (int b : ac.target_blocks) {
      for (Projection proj : ac.target_projections) {
        const std::uint64_t s =
            derive_seed(seed, "adapter", static_cast<std::uint64_t>(b) * 2 + (proj == Projection::value ? 1 : 0));
        if (ac.kind == AdapterKind::mora)
          adapters_.emplace(std::pair{b, proj}, init_mora(d, d, ac.rank, ac.init_std, s));
        else
          adapters_.emplace(std::pair{b, proj}, init_lora(d, d, ac.rank, ac.init_std, s));
      }
    }
  }
}

Adapter* MultimodalEncoder::adapter(int block, Projection proj) {
  auto it = adapters_.find({block, proj});
  return it == adapters_.end() ? nullptr : &it->second;
}

Tensor MultimodalEncoder::embed_sample(const Sample& sample) const {
  if (sample.pattern.empty()) throw ContractError("embed_sample: sample has no modality present");
  const Index d = cfg_.hidden_dim;
  const Index P = cfg_.num_patches();
  const Index T = cfg_.max_text_len;
  Matrix tokens(1 + P + T, d);
  tokens.row(0) = class_token_.value().row(0);

  const bool has_image = sample.pattern.has(Modality::image);
  if (has_image && (sample.image.rows() != P || sample.image.cols() != cfg_.patch_dim))
    throw IngestionError("image is " + shape_string(sample.image.rows(), sample.image.cols()) + ", expected " +
                         shape_string(P, cfg_.patch_dim));
  Matrix patches = has_image ? sample.image : Matrix::Zero(P, cfg_.patch_dim);
  Matrix image_tokens = patches * patch_weight_.value().transpose();
  image_tokens.rowwise() += patch_bias_.value().row(0) + type_embedding_.value().row(0);
  image_tokens += image_position_.value();
  tokens.middleRows(1, P) = image_tokens;

  const bool has_text = sample.pattern.has(Modality::text);
  if (has_text && static_cast<Index>(sample.text.size()) > T)
    throw IngestionError("text has " + std::to_string(sample.text.size()) + " tokens, limit is " + std::to_string(T));
  for (Index t = 0; t < T; ++t) {
    int id = kPadToken;
    if (has_text && t < static_cast<Index>(sample.text.size())) id = sample.text[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg_.vocab_size)
      throw IngestionError("token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(cfg_.vocab_size));
    tokens.row(1 + P + t) = text_embedding_.value().row(id) + type_embedding_.value().row(1) +
                            text_position_.value().row(t);
  }
  return Tensor(std::move(tokens));
}

Tensor MultimodalEncoder::project(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int block,
                                  Projection proj, MissingPattern pattern) const {
  auto it = adapters_.find({block, proj});
  if (it == adapters_.end()) return linear(g, x, w, b);
  return adapted_linear_forward(g, x, w, b, pattern, it->second);
}

Tensor MultimodalEncoder::forward(Graph& g, const Sample& sample) const {
  const Index heads = cfg_.num_heads;
  const Index head_dim = cfg_.hidden_dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const MissingPattern pattern = sample.pattern;

  Tensor x = embed_sample(sample);
  std::vector<Tensor> head_out(static_cast<std::size_t>(heads));
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    const int bi = static_cast<int>(b);
    Tensor h = layer_norm(g, x, blk.ln1_gain, blk.ln1_bias, cfg_.ln_eps);
    Tensor q = project(g, h, blk.wq, blk.bq, bi, Projection::query, pattern);
    Tensor k = linear(g, h, blk.wk, blk.bk);
    Tensor v = project(g, h, blk.wv, blk.bv, bi, Projection::value, pattern);
    for (Index hd = 0; hd < heads; ++hd) {
      Tensor qh = slice_cols(g, q, hd * head_dim, head_dim);
      Tensor kh = slice_cols(g, k, hd * head_dim, head_dim);
      Tensor vh = slice_cols(g, v, hd * head_dim, head_dim);
      Tensor att = softmax_rows(g, scale(g, matmul_nt(g, qh, kh), inv_sqrt));
      head_out[static_cast<std::size_t>(hd)] = matmul(g, att, vh);
    }
    Tensor attn = linear(g, concat_cols(g, head_out), blk.wo, blk.bo);
    x = add(g, x, attn);
    Tensor h2 = layer_norm(g, x, blk.ln2_gain, blk.ln2_bias, cfg_.ln_eps);
    Tensor mlp = linear(g, gelu(g, linear(g, h2, blk.w1, blk.b1)), blk.w2, blk.b2);
    x = add(g, x, mlp);
  }
  Tensor cls = layer_norm(g, slice_rows(g, x, 0, 1), final_gain_, final_bias_, cfg_.ln_eps);
  Tensor hidden = gelu(g, linear(g, cls, classifier_.w1, classifier_.b1));
  return linear(g, hidden, classifier_.w2, classifier_.b2);
}

std::vector<NamedTensor> MultimodalEncoder::parameters() const {
  std::vector<NamedTensor> out;
  auto add = [&](std::string name, const Tensor& t, bool decay) { out.push_back({std::move(name), t, decay}); };
  add("embed.text", text_embedding_, false);
  add("embed.patch.weight", patch_weight_, false);
  add("embed.patch.bias", patch_bias_, false);
  add("embed.type", type_embedding_, false);
  add("embed.image_pos", image_position_, false);
  add("embed.text_pos", text_position_, false);
  add("embed.cls", class_token_, false);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    add(p + "ln1.gain", blk.ln1_gain, false);
    add(p + "ln1.bias", blk.ln1_bias, false);
    add(p + "attn.query.weight", blk.wq, true);
    add(p + "attn.query.bias", blk.bq, false);
    add(p + "attn.key.weight", blk.wk, true);
    add(p + "attn.key.bias", blk.bk, false);
    add(p + "attn.value.weight", blk.wv, true);
    add(p + "attn.value.bias", blk.bv, false);
    add(p + "attn.out.weight", blk.wo, true);
    add(p + "attn.out.bias", blk.bo, false);
    add(p + "ln2.gain", blk.ln2_gain, false);
    add(p + "ln2.bias", blk.ln2_bias, false);
    add(p + "mlp.fc1.weight", blk.w1, true);
    add(p + "mlp.fc1.bias", blk.b1, false);
    add(p + "mlp.fc2.weight", blk.w2, true);
    add(p + "mlp.fc2.bias", blk.b2, false);
  }
  add("final_ln.gain", final_gain_, false);
  add("final_ln.bias", final_bias_, false);
  add("classifier.fc1.weight", classifier_.w1, true);
  add("classifier.fc1.bias", classifier_.b1, false);
  add("classifier.fc2.weight", classifier_.w2, true);
  add("classifier.fc2.bias", classifier_.b2, false);
  const AdapterKind kind = cfg_.adapter.kind;
  for (const auto& [key, adapter] : adapters_) {
    const auto [block, proj] = key;
    if (const auto* m = std::get_if<MoraAdapter>(&adapter)) {
      add(adapter_key(kind, block, proj, "A"), m->A, true);
      add(adapter_key(kind, block, proj, "B_img"), m->B_img, true);
      add(adapter_key(kind, block, proj, "B_txt"), m->B_txt, true);
    } else {
      const auto& l = std::get<LoraAdapter>(adapter);
      add(adapter_key(kind, block, proj, "A"), l.A, true);
      add(adapter_key(kind, block, proj, "B"), l.B, true);
    }
  }
  return out;
}

std::vector<NamedTensor> MultimodalEncoder::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (NamedTensor& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  return out;
}

void MultimodalEncoder::freeze_backbone() {
  for (NamedTensor& p : parameters()) {
    const bool trainable = p.name.starts_with("classifier.") || p.name.starts_with("mora.") ||
                           p.name.starts_with("lora.");
    p.tensor.set_requires_grad(trainable);
  }
}

bool MultimodalEncoder::backbone_frozen() const {
  for (const NamedTensor& p : parameters()) {
    const bool trainable = p.name.starts_with("classifier.") || p.name.starts_with("mora.") ||
                           p.name.starts_with("lora.");
    if (!trainable && p.tensor.requires_grad()) return false;
  }
  return true;
}

ParamCounts MultimodalEncoder::count_params() const {
  ParamCounts c;
  for (const NamedTensor& p : parameters()) {
    c.total += p.tensor.size();
    if (p.tensor.requires_grad()) c.trainable += p.tensor.size();
  }
  return c;
}

Checkpoint MultimodalEncoder::state(bool trainable_only) const {
  Checkpoint ckpt;
  for (const NamedTensor& p : parameters())
    if (!trainable_only || p.tensor.requires_grad()) ckpt.entries.emplace_back(p.name, p.tensor.value());
  return ckpt;
}

void MultimodalEncoder::load_state(const Checkpoint& ckpt) {
  std::vector<NamedTensor> params = parameters();
  for (const auto& [name, value] : ckpt.entries) {
    auto it = std::find_if(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
    if (it == params.end()) throw ParseError("checkpoint entry '" + name + "' has no matching parameter");
    if (it->tensor.rows() != value.rows() || it->tensor.cols() != value.cols())
      throw ParseError("checkpoint entry '" + name + "' is " + shape_string(value.rows(), value.cols()) +
                       ", parameter is " + shape_string(it->tensor.rows(), it->tensor.cols()));
    check_finite(value, "checkpoint load");
    it->tensor.mutable_value() = value;
  }
}

}  // namespace mora
