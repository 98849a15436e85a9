#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mora/adapters.hpp"
#include "mora/checkpoint.hpp"
#include "mora/data.hpp"
#include "mora/tensor.hpp"

namespace mora {

struct ModelConfig {
  Index hidden_dim = 32;
  Index num_blocks = 2;
  Index num_heads = 4;
  Index mlp_ratio = 2;
  Index vocab_size = 64;
  Index max_text_len = 8;
  Index image_grid = 4;  // patches per side
  Index patch_dim = 8;
  Index num_labels = 4;
  double init_std = 0.02;  // backbone and classifier weights
  double ln_eps = 1e-5;
  AdapterConfig adapter;

  Index num_patches() const { return image_grid * image_grid; }
  Index sequence_length() const { return 1 + num_patches() + max_text_len; }
  SampleShape sample_shape() const { return {num_patches(), patch_dim, max_text_len}; }

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// Name, shape, trainability and weight-decay eligibility of one parameter.
struct ParamSpec {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  bool trainable = false;
  bool decay = false;
};

/// Every parameter the encoder for `cfg` owns, in canonical order, with the
/// trainability it has after freeze_backbone. Needs no allocation, so it also
/// serves configurations too large to instantiate.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

struct ParamCounts {
  std::int64_t total = 0;
  std::int64_t trainable = 0;
  double ratio() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total); }
};

ParamCounts count_params(const std::vector<ParamSpec>& layout);

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay = false;
};

/// Small two-stream transformer encoder: class token, image patches and text
/// tokens share one pre-norm transformer; the class token feeds a two-layer
/// classifier. Backbone tensors are frozen stand-ins for pretrained weights.
class MultimodalEncoder {
 public:
  MultimodalEncoder(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// [(1+P+T)×d] input tokens. Absent modalities are embedded from their
  /// dummies through the same fixed pipeline. Throws IngestionError on token
  /// ids outside the vocabulary.
  Tensor embed_sample(const Sample& sample) const;

  /// Logits as a 1×num_labels tensor.
  Tensor forward(Graph& g, const Sample& sample) const;

  /// Makes adapters and classifier the only trainable tensors. Idempotent.
  void freeze_backbone();
  bool backbone_frozen() const;

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> trainable_parameters() const;
  ParamCounts count_params() const;

  const std::map<std::pair<int, Projection>, Adapter>& adapters() const { return adapters_; }
  Adapter* adapter(int block, Projection proj);

  Checkpoint state(bool trainable_only = false) const;
  /// Copies matching entries into the parameters. Unknown names or shape
  /// mismatches throw ParseError.
  void load_state(const Checkpoint& ckpt);

  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
  };
  struct Classifier {
    Tensor w1, b1, w2, b2;
  };

  const std::vector<Block>& blocks() const { return blocks_; }
  const Classifier& classifier() const { return classifier_; }
  Classifier& classifier() { return classifier_; }

  const Tensor& text_embedding() const { return text_embedding_; }
  const Tensor& patch_weight() const { return patch_weight_; }
  const Tensor& patch_bias() const { return patch_bias_; }
  const Tensor& type_embedding() const { return type_embedding_; }
  const Tensor& image_position() const { return image_position_; }
  const Tensor& text_position() const { return text_position_; }
  const Tensor& class_token() const { return class_token_; }
  const Tensor& final_gain() const { return final_gain_; }
  const Tensor& final_bias() const { return final_bias_; }

 private:
  Tensor project(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int block, Projection proj,
                 MissingPattern pattern) const;

  ModelConfig cfg_;
  Tensor text_embedding_;   // [vocab×d]
  Tensor patch_weight_;     // [d×patch_dim]
  Tensor patch_bias_;       // [1×d]
  Tensor type_embedding_;   // [2×d]: row 0 image, row 1 text
  Tensor image_position_;   // [P×d]
  Tensor text_position_;    // [T×d]
  Tensor class_token_;      // [1×d]
  std::vector<Block> blocks_;
  Tensor final_gain_, final_bias_;
  Classifier classifier_;
  std::map<std::pair<int, Projection>, Adapter> adapters_;
};

/// Adapter checkpoint key, e.g. "mora.0.query.B_img".
std::string adapter_key(AdapterKind kind, int block, Projection proj, const char* part);

}  // namespace mora
