#include "tipslab/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "tipslab/errors.hpp"
#include "tipslab/synthdata.hpp"

namespace tipslab::model {

namespace F = torch::nn::functional;

void ImageEncoderConfig::validate() const {
  if (patch_size <= 0) throw ValidationError("model.patch_size must be positive");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw ValidationError("model.embed_dim must be a positive multiple of model.heads");
  }
  if (depth < 1) throw ValidationError("model.depth must be >= 1");
  if (mlp_ratio < 1) throw ValidationError("model.mlp_ratio must be >= 1");
  if (pos_rows < 1 || pos_cols < 1) throw ValidationError("model position grid must be at least 1x1");
  if (proj_dim < 1) throw ValidationError("model.proj_dim must be positive");
}

void TextEncoderConfig::validate() const {
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw ValidationError("text.embed_dim must be a positive multiple of text.heads");
  }
  if (depth < 1) throw ValidationError("text.depth must be >= 1");
  if (mlp_ratio < 1) throw ValidationError("text.mlp_ratio must be >= 1");
  if (max_len < 1) throw ValidationError("text.max_len must be >= 1");
  if (proj_dim < 1) throw ValidationError("text.proj_dim must be positive");
}

void HeadConfig::validate() const {
  if (in_dim < 1 || hidden_dim < 1 || bottleneck_dim < 1 || prototypes < 1) {
    throw ValidationError("head dimensions must be positive");
  }
}

void ModelConfig::validate() const {
  image.validate();
  text.validate();
  head.validate();
  if (head.in_dim != image.embed_dim) throw ValidationError("head.in_dim must equal model.embed_dim");
  if (text.proj_dim != image.proj_dim) throw ValidationError("text.proj_dim must equal model.proj_dim");
}

std::string to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["image"] = {{"patch_size", cfg.image.patch_size}, {"embed_dim", cfg.image.embed_dim},
                {"depth", cfg.image.depth},           {"heads", cfg.image.heads},
                {"mlp_ratio", cfg.image.mlp_ratio},   {"pos_rows", cfg.image.pos_rows},
                {"pos_cols", cfg.image.pos_cols},     {"proj_dim", cfg.image.proj_dim}};
  j["text"] = {{"embed_dim", cfg.text.embed_dim}, {"depth", cfg.text.depth},     {"heads", cfg.text.heads},
               {"mlp_ratio", cfg.text.mlp_ratio}, {"max_len", cfg.text.max_len}, {"proj_dim", cfg.text.proj_dim}};
  j["head"] = {{"in_dim", cfg.head.in_dim},
               {"hidden_dim", cfg.head.hidden_dim},
               {"bottleneck_dim", cfg.head.bottleneck_dim},
               {"prototypes", cfg.head.prototypes}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    const auto& im = j.at("image");
    c.image.patch_size = im.at("patch_size");
    c.image.embed_dim = im.at("embed_dim");
    c.image.depth = im.at("depth");
    c.image.heads = im.at("heads");
    c.image.mlp_ratio = im.at("mlp_ratio");
    c.image.pos_rows = im.at("pos_rows");
    c.image.pos_cols = im.at("pos_cols");
    c.image.proj_dim = im.at("proj_dim");
    const auto& tx = j.at("text");
    c.text.embed_dim = tx.at("embed_dim");
    c.text.depth = tx.at("depth");
    c.text.heads = tx.at("heads");
    c.text.mlp_ratio = tx.at("mlp_ratio");
    c.text.max_len = tx.at("max_len");
    c.text.proj_dim = tx.at("proj_dim");
    const auto& hd = j.at("head");
    c.head.in_dim = hd.at("in_dim");
    c.head.hidden_dim = hd.at("hidden_dim");
    c.head.bottleneck_dim = hd.at("bottleneck_dim");
    c.head.prototypes = hd.at("prototypes");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed model config: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------

Vocab Vocab::from_templates() {
  std::vector<std::string> words = {"[PAD]", "[UNK]"};
  for (auto& w : synth::caption_vocabulary()) words.push_back(std::move(w));
  return Vocab(std::move(words));
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < 2 || words_[kPad] != "[PAD]" || words_[kUnk] != "[UNK]") {
    throw ValidationError("vocabulary must start with [PAD], [UNK]");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<std::int64_t>(i));
}

std::int64_t Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(std::int64_t id) const {
  if (id < 0 || id >= size()) throw ValidationError("token id out of range");
  return words_[static_cast<std::size_t>(id)];
}

TokenizedText tokenize(std::string_view text, const Vocab& vocab, int max_len) {
  if (max_len < 1) throw ValidationError("max_len must be >= 1");
  std::vector<std::int64_t> ids;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) ids.push_back(vocab.id(word));
    word.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  if (ids.empty()) ids.push_back(Vocab::kUnk);

  TokenizedText out;
  out.truncated = static_cast<int>(ids.size()) > max_len;
  ids.resize(static_cast<std::size_t>(max_len), Vocab::kPad);
  out.length = static_cast<int>(std::count_if(ids.begin(), ids.end(), [](auto i) { return i != Vocab::kPad; }));
  out.ids = std::move(ids);
  return out;
}

std::string detokenize(std::span<const std::int64_t> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == Vocab::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------

PosEmbedding interpolate_pos_embeddings(const PosEmbedding& pos, int rows, int cols) {
  if (rows < 1 || cols < 1) throw ValidationError("position grid must be at least 1x1");
  if (!pos.grid.defined() || pos.grid.dim() != 3 || pos.grid.size(0) < 1 || pos.grid.size(1) < 1) {
    throw ValidationError("source position grid must be [rows >= 1, cols >= 1, D]");
  }
  if (pos.grid.size(0) == rows && pos.grid.size(1) == cols) return pos;
  auto g = pos.grid.permute({2, 0, 1}).unsqueeze(0);  // [1, D, R, C]
  auto r = F::interpolate(g, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{rows, cols})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  return {pos.cls, r.squeeze(0).permute({1, 2, 0}).contiguous()};
}

// ---------------------------------------------------------------------------

BlockImpl::BlockImpl(int dim, int heads, int mlp_ratio) : heads_(heads) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, const torch::Tensor& key_padding, torch::Tensor* values_out) {
  const auto b = x.size(0), t = x.size(1), d = x.size(2);
  const auto dh = d / heads_;
  auto qkv = qkv_->forward(norm1_->forward(x)).view({b, t, 3, heads_, dh}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0], k = qkv[1], v = qkv[2];  // [B, H, T, dh]
  auto scores = torch::matmul(q, k.transpose(-2, -1)) * (1.0 / std::sqrt(static_cast<double>(dh)));
  if (key_padding.defined()) {
    scores = scores.masked_fill(key_padding.view({b, 1, 1, t}), -std::numeric_limits<float>::infinity());
  }
  auto ctx = torch::matmul(torch::softmax(scores, -1), v).transpose(1, 2).reshape({b, t, d});
  if (values_out) *values_out = v.transpose(1, 2).reshape({b, t, d});
  auto h = x + out_->forward(ctx);
  return h + fc2_->forward(torch::gelu(fc1_->forward(norm2_->forward(h))));
}

// ---------------------------------------------------------------------------

ImageEncoderImpl::ImageEncoderImpl(const ImageEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.embed_dim;
  const int patch_dim = 3 * cfg_.patch_size * cfg_.patch_size;
  patch_embed_ = register_module("patch_embed", torch::nn::Linear(patch_dim, d));
  cls_token_ = register_parameter("cls_token", torch::randn({ImageEncoderConfig::num_cls, d}) * 0.02);
  cls_pos_ = register_parameter("cls_pos", torch::randn({ImageEncoderConfig::num_cls, d}) * 0.02);
  pos_grid_ = register_parameter("pos_grid", torch::randn({cfg_.pos_rows, cfg_.pos_cols, d}) * 0.02);
  mask_token_ = register_parameter("mask_token", torch::randn({d}) * 0.02);
  for (int i = 0; i < cfg_.depth; ++i) {
    blocks_.push_back(register_module("block" + std::to_string(i), Block(d, cfg_.heads, cfg_.mlp_ratio)));
  }
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  proj_ = register_module("proj", torch::nn::Linear(torch::nn::LinearOptions(d, cfg_.proj_dim).bias(false)));
}

torch::Tensor ImageEncoderImpl::embed_tokens(const torch::Tensor& images, const std::optional<torch::Tensor>& mask) {
  if (images.dim() != 4 || images.size(1) != 3) throw ValidationError("images must be [B, 3, H, W]");
  const auto p = cfg_.patch_size;
  const auto b = images.size(0), h = images.size(2), w = images.size(3);
  if (h % p != 0 || w % p != 0) {
    throw ValidationError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by patch size " + std::to_string(p));
  }
  const auto rows = h / p, cols = w / p, n = rows * cols;
  auto patches = images.view({b, 3, rows, p, cols, p}).permute({0, 2, 4, 1, 3, 5}).reshape({b, n, 3 * p * p});
  auto emb = patch_embed_->forward(patches);
  if (mask) {
    if (mask->dim() != 2 || mask->size(0) != b || mask->size(1) != n) {
      throw ValidationError("mask must be [B, N] with N = " + std::to_string(n));
    }
    emb = torch::where(mask->to(torch::kBool).unsqueeze(-1), mask_token_.expand_as(emb), emb);
  }
  auto pos = interpolate_pos_embeddings({cls_pos_, pos_grid_}, static_cast<int>(rows), static_cast<int>(cols));
  auto cls = (cls_token_ + cls_pos_).unsqueeze(0).expand({b, ImageEncoderConfig::num_cls, cfg_.embed_dim});
  return torch::cat({cls, emb + pos.grid.reshape({1, n, cfg_.embed_dim})}, 1);
}

EncoderOutput ImageEncoderImpl::forward(const torch::Tensor& images, const std::optional<torch::Tensor>& mask) {
  auto x = embed_tokens(images, mask);
  torch::Tensor values;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i]->forward(x, {}, i + 1 == blocks_.size() ? &values : nullptr);
  }
  x = norm_->forward(x);
  constexpr int c = ImageEncoderConfig::num_cls;
  EncoderOutput out;
  out.cls_tokens = x.narrow(1, 0, c);
  out.patches = x.narrow(1, c, x.size(1) - c);
  out.values = values.narrow(1, c, values.size(1) - c);
  auto cls_emb = F::normalize(proj_->forward(out.cls_tokens), F::NormalizeFuncOptions().dim(-1));
  out.cls1 = cls_emb.select(1, 0);
  out.cls2 = cls_emb.select(1, 1);
  return out;
}

torch::Tensor ImageEncoderImpl::dense_text_embeddings(const torch::Tensor& values) {
  auto x = blocks_.back()->project_attention(values);
  return F::normalize(proj_->forward(norm_->forward(x)), F::NormalizeFuncOptions().dim(-1));
}

void ImageEncoderImpl::set_pos_grid(int rows, int cols) {
  torch::NoGradGuard guard;
  auto resized = interpolate_pos_embeddings({cls_pos_, pos_grid_}, rows, cols);
  pos_grid_.set_data(resized.grid.detach().clone());
}

// ---------------------------------------------------------------------------

TextEncoderImpl::TextEncoderImpl(const TextEncoderConfig& cfg, std::int64_t vocab_size) : cfg_(cfg) {
  cfg_.validate();
  token_embed_ = register_module("token_embed", torch::nn::Embedding(vocab_size, cfg_.embed_dim));
  pos_ = register_parameter("pos", torch::randn({cfg_.max_len, cfg_.embed_dim}) * 0.02);
  for (int i = 0; i < cfg_.depth; ++i) {
    blocks_.push_back(
        register_module("block" + std::to_string(i), Block(cfg_.embed_dim, cfg_.heads, cfg_.mlp_ratio)));
  }
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.embed_dim})));
  proj_ = register_module("proj",
                          torch::nn::Linear(torch::nn::LinearOptions(cfg_.embed_dim, cfg_.proj_dim).bias(false)));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& tokens) {
  if (tokens.dim() != 2) throw ValidationError("tokens must be [B, L]");
  const auto len = tokens.size(1);
  if (len < 1 || len > cfg_.max_len) throw ValidationError("token sequence length must be in [1, max_len]");
  auto x = token_embed_->forward(tokens) + pos_.narrow(0, 0, len).unsqueeze(0);
  auto pad = tokens.eq(Vocab::kPad);
  // A row of pads only would mask every key; its first position stays visible.
  pad.select(1, 0).fill_(false);
  for (auto& blk : blocks_) x = blk->forward(x, pad);
  auto pooled = norm_->forward(x.select(1, 0));
  return F::normalize(proj_->forward(pooled), F::NormalizeFuncOptions().dim(-1));
}

// ---------------------------------------------------------------------------

ProjectionHeadImpl::ProjectionHeadImpl(const HeadConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  fc1_ = register_module("fc1", torch::nn::Linear(cfg_.in_dim, cfg_.hidden_dim));
  fc2_ = register_module("fc2", torch::nn::Linear(cfg_.hidden_dim, cfg_.hidden_dim));
  fc3_ = register_module("fc3", torch::nn::Linear(cfg_.hidden_dim, cfg_.bottleneck_dim));
  last_ = register_module("last",
                          torch::nn::Linear(torch::nn::LinearOptions(cfg_.bottleneck_dim, cfg_.prototypes).bias(false)));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& x) {
  auto h = torch::gelu(fc1_->forward(x));
  h = torch::gelu(fc2_->forward(h));
  h = F::normalize(fc3_->forward(h), F::NormalizeFuncOptions().dim(-1));
  return last_->forward(h);
}

torch::Tensor prototype_dist(const torch::Tensor& logits, double temperature, const std::optional<torch::Tensor>& center) {
  if (!(temperature > 0)) throw ValidationError("temperature must be positive");
  if (!torch::isfinite(logits).all().item<bool>()) throw NumericError("non-finite prototype logits");
  auto z = logits;
  if (center) {
    if (center->size(-1) != logits.size(-1)) throw ValidationError("center dimension must equal prototype count K");
    z = z - *center;
  }
  return torch::softmax(z / temperature, -1);
}

torch::Tensor project_prototypes(const torch::Tensor& embedding, ProjectionHead& head, double temperature,
                                 const std::optional<torch::Tensor>& center) {
  return prototype_dist(head->forward(embedding), temperature, center);
}

// ---------------------------------------------------------------------------

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

namespace {

void assign(torch::Tensor& dst, const torch::Tensor& src, const std::string& name) {
  if (dst.sizes() != src.sizes()) {
    if (name.ends_with("pos_grid") && src.dim() == 3 && dst.dim() == 3 && src.size(2) == dst.size(2)) {
      dst.set_data(src.detach().to(dst.dtype()).clone());
      return;
    }
    throw LoadError("shape mismatch for parameter " + name);
  }
  dst.copy_(src);
}

}  // namespace

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters(true);
  for (auto& item : dst.named_parameters(true)) {
    const auto* s = src_params.find(item.key());
    if (!s) throw LoadError("source module lacks parameter " + item.key());
    assign(item.value(), *s, item.key());
  }
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& item : module.named_parameters(true)) {
    mix(item.key().data(), item.key().size());
    auto t = item.value().detach().contiguous();
    mix(t.data_ptr(), static_cast<std::size_t>(t.nbytes()));
  }
  return h;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'T', 'I', 'P', 'S', 'C', 'K', 'P', 'T'};

std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "f32";
    case torch::kFloat64:
      return "f64";
    case torch::kInt64:
      return "i64";
    default:
      throw ValidationError("unsupported checkpoint tensor dtype");
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "f32") return torch::kFloat32;
  if (tag == "f64") return torch::kFloat64;
  if (tag == "i64") return torch::kInt64;
  throw LoadError("unknown tensor dtype tag '" + tag + "'");
}

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw LoadError("truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["config_yaml"] = ckpt.config_yaml;
  header["step"] = ckpt.step;
  header["meta"] = ckpt.meta;
  auto index = nlohmann::ordered_json::array();
  std::vector<torch::Tensor> blobs;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    index.push_back({{"name", name},
                     {"dtype", dtype_tag(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", offset},
                     {"nbytes", t.nbytes()}});
    offset += t.nbytes();
    blobs.push_back(std::move(t));
  }
  header["tensors"] = std::move(index);
  const auto text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + path);
    os.write(kMagic, sizeof kMagic);
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : blobs) os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    if (!os) throw IoError("failed writing checkpoint " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot finalize checkpoint " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path);
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw LoadError(path + " is not a checkpoint archive");
  }
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = read_le<std::uint64_t>(is);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) throw LoadError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt checkpoint header: " + std::string(e.what()));
  }
  Checkpoint ckpt;
  ckpt.config_yaml = header.at("config_yaml").get<std::string>();
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.meta = header.at("meta").get<std::map<std::string, std::string>>();
  const auto data_start = is.tellg();
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_tag(entry.at("dtype").get<std::string>())));
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != t.nbytes()) throw LoadError("tensor size mismatch in checkpoint");
    is.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    if (!is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes))) {
      throw LoadError("truncated tensor data in checkpoint");
    }
    ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& item : module.named_parameters(true)) {
    ckpt.tensors[prefix + item.key()] = item.value().detach().clone();
  }
}

void get_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& item : module.named_parameters(true)) {
    auto it = ckpt.tensors.find(prefix + item.key());
    if (it == ckpt.tensors.end()) throw LoadError("checkpoint lacks tensor " + prefix + item.key());
    assign(item.value(), it->second, prefix + item.key());
  }
}

bool has_module(const Checkpoint& ckpt, const std::string& prefix) {
  auto it = ckpt.tensors.lower_bound(prefix);
  return it != ckpt.tensors.end() && it->first.starts_with(prefix);
}

}  // namespace tipslab::model
