#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tipslab::model {

struct ImageEncoderConfig {
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int pos_rows = 8;  ///< position-embedding grid at construction
  int pos_cols = 8;
  int proj_dim = 64;  ///< joint image-text embedding width
  static constexpr int num_cls = 2;

  void validate() const;
};

struct TextEncoderConfig {
  int embed_dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int max_len = 32;
  int proj_dim = 64;

  void validate() const;
};

/// Projection head h_s / h_t: 3-layer MLP, L2-normalized bottleneck, linear to K.
struct HeadConfig {
  int in_dim = 64;
  int hidden_dim = 256;
  int bottleneck_dim = 64;
  int prototypes = 256;

  void validate() const;
};

/// Every architecture knob of the student (and of a same-shaped teacher).
struct ModelConfig {
  ImageEncoderConfig image;
  TextEncoderConfig text;
  HeadConfig head;

  void validate() const;
};

std::string to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Tokenizer

class Vocab {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;

  /// Specials followed by every caption-template word.
  static Vocab from_templates();
  explicit Vocab(std::vector<std::string> words);

  std::int64_t id(std::string_view word) const;
  const std::string& word(std::int64_t id) const;
  std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int64_t> index_;
};

struct TokenizedText {
  std::vector<std::int64_t> ids;  ///< exactly max_len entries
  int length = 0;                 ///< non-pad prefix length
  bool truncated = false;
};

/// Lowercased whitespace split; unknown words map to UNK; empty text gives a
/// single UNK. Padded or truncated to max_len.
TokenizedText tokenize(std::string_view text, const Vocab& vocab, int max_len);

/// Inverse of tokenize for pad-free known ids (pads are dropped).
std::string detokenize(std::span<const std::int64_t> ids, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Position embeddings

struct PosEmbedding {
  torch::Tensor cls;   ///< [num_cls, D], passed through unchanged
  torch::Tensor grid;  ///< [rows, cols, D]
};

/// Bilinear (half-pixel centers) resample of the patch grid to rows x cols.
/// Differentiable; identity when the grid already has the requested size.
PosEmbedding interpolate_pos_embeddings(const PosEmbedding& pos, int rows, int cols);

// ---------------------------------------------------------------------------
// Transformer building blocks

/// Pre-norm transformer block. `values_out`, when given, receives the
/// concatenated per-head value projections [B, T, D] (before output projection).
class BlockImpl : public torch::nn::Module {
 public:
  BlockImpl(int dim, int heads, int mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& key_padding = {}, torch::Tensor* values_out = nullptr);

  /// Output projection of the attention sub-layer, used by dense feature extraction.
  torch::Tensor project_attention(const torch::Tensor& values) { return out_->forward(values); }

 private:
  int heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, out_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Block);

struct EncoderOutput {
  torch::Tensor cls1;        ///< [B, P] unit-norm, web/short-caption token
  torch::Tensor cls2;        ///< [B, P] unit-norm, synthetic-caption token
  torch::Tensor cls_tokens;  ///< [B, 2, D] final-norm CLS states (prototype-head inputs)
  torch::Tensor patches;     ///< [B, N, D] final-norm patch states
  torch::Tensor values;      ///< [B, N, D] last-layer attention values at patch positions
};

class ImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ImageEncoderImpl(const ImageEncoderConfig& cfg);

  /// images: [B, 3, H, W]; mask: optional bool [B, N], true = masked patch.
  EncoderOutput forward(const torch::Tensor& images, const std::optional<torch::Tensor>& mask = std::nullopt);

  /// Token sequence entering block 1 (CLS + patches, position embeddings added).
  torch::Tensor embed_tokens(const torch::Tensor& images, const std::optional<torch::Tensor>& mask = std::nullopt);

  /// Maps last-layer values into the joint text space: output projection,
  /// final norm, image projection, L2 normalization. [B, N, D] -> [B, N, P].
  torch::Tensor dense_text_embeddings(const torch::Tensor& values);

  /// Resizes the stored position grid in place (resolution switch).
  void set_pos_grid(int rows, int cols);
  int pos_rows() const { return static_cast<int>(pos_grid_.size(0)); }
  int pos_cols() const { return static_cast<int>(pos_grid_.size(1)); }

  const ImageEncoderConfig& config() const { return cfg_; }

 private:
  ImageEncoderConfig cfg_;
  torch::nn::Linear patch_embed_{nullptr};
  torch::Tensor cls_token_, cls_pos_, pos_grid_, mask_token_;
  std::vector<Block> blocks_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(ImageEncoder);

class TextEncoderImpl : public torch::nn::Module {
 public:
  TextEncoderImpl(const TextEncoderConfig& cfg, std::int64_t vocab_size);

  /// tokens: [B, L] int64 with L <= max_len. Returns unit-norm [B, P] from the
  /// first-token state; pad keys are masked out of attention.
  torch::Tensor forward(const torch::Tensor& tokens);

  const TextEncoderConfig& config() const { return cfg_; }

 private:
  TextEncoderConfig cfg_;
  torch::nn::Embedding token_embed_{nullptr};
  torch::Tensor pos_;
  std::vector<Block> blocks_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(TextEncoder);

class ProjectionHeadImpl : public torch::nn::Module {
 public:
  explicit ProjectionHeadImpl(const HeadConfig& cfg);
  /// [..., in_dim] -> prototype logits [..., K]
  torch::Tensor forward(const torch::Tensor& x);
  const HeadConfig& config() const { return cfg_; }

 private:
  HeadConfig cfg_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, fc3_{nullptr}, last_{nullptr};
};
TORCH_MODULE(ProjectionHead);

/// softmax((logits - center) / temperature). Throws NumericError on
/// non-finite logits.
torch::Tensor prototype_dist(const torch::Tensor& logits, double temperature,
                             const std::optional<torch::Tensor>& center = std::nullopt);

/// head(embedding) followed by prototype_dist.
torch::Tensor project_prototypes(const torch::Tensor& embedding, ProjectionHead& head, double temperature,
                                 const std::optional<torch::Tensor>& center = std::nullopt);

// ---------------------------------------------------------------------------
// Parameter utilities

std::int64_t count_parameters(const torch::nn::Module& module);

/// Copies every parameter of src into dst by name (shapes must match, and the
/// position grid is resized when needed).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

/// Order-sensitive FNV-1a digest of parameter names and raw bytes.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

// ---------------------------------------------------------------------------
// Checkpoint archive
//
// Layout (little-endian): "TIPSCKPT" magic, u32 version, u64 header length,
// UTF-8 JSON header, then raw tensor blobs in header order. The header holds
// the config snapshot, the step counter, RNG state and a tensor index.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_yaml;
  std::int64_t step = 0;
  std::map<std::string, std::string> meta;     ///< small string attributes (rng state, pos grid, ...)
  std::map<std::string, torch::Tensor> tensors;  ///< keyed by stable names
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);
/// Throws LoadError when a parameter is missing or has the wrong shape.
void get_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);
bool has_module(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace tipslab::model
