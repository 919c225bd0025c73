#include "tipslab/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "tipslab/errors.hpp"

namespace tipslab::config {

using trainer::RunConfig;

namespace {

template <typename E>
struct EnumTable {
  std::vector<std::pair<std::string, E>> entries;

  E parse(const std::string& key, const std::string& v) const {
    std::string names;
    for (const auto& [n, e] : entries) {
      if (n == v) return e;
      names += (names.empty() ? "" : ", ") + n;
    }
    throw ValidationError(key + ": unknown value '" + v + "' (expected one of " + names + ")");
  }
  std::string name(E e) const {
    for (const auto& [n, x] : entries) {
      if (x == e) return n;
    }
    return "?";
  }
};

const EnumTable<trainer::Mode> kModes{{{"pretrain", trainer::Mode::pretrain}, {"distill", trainer::Mode::distill}}};
const EnumTable<trainer::PatchObjective> kObjectives{
    {{"ibot", trainer::PatchObjective::ibot}, {"ibot_pp", trainer::PatchObjective::ibot_pp}}};
const EnumTable<trainer::InitSource> kInit{
    {{"random", trainer::InitSource::random}, {"checkpoint", trainer::InitSource::checkpoint}}};
const EnumTable<ema::EmaScope> kScopes{{{"full", ema::EmaScope::full},
                                        {"head_only", ema::EmaScope::head_only},
                                        {"frozen", ema::EmaScope::frozen},
                                        {"shared", ema::EmaScope::shared}}};
const EnumTable<ema::MomentumSchedule> kSchedules{
    {{"constant", ema::MomentumSchedule::constant}, {"cosine", ema::MomentumSchedule::cosine}}};
const EnumTable<objectives::CaptionMode> kCaptionModes{{{"one_cls_pool", objectives::CaptionMode::one_cls_pool},
                                                        {"two_cls_fixed", objectives::CaptionMode::two_cls_fixed},
                                                        {"two_cls_sampled", objectives::CaptionMode::two_cls_sampled}}};
const EnumTable<synth::Granularity> kGranularities{{{"short", synth::Granularity::short_caption},
                                                    {"medium", synth::Granularity::medium_caption},
                                                    {"long", synth::Granularity::long_caption}}};

std::string scalar(const std::string& key, const YAML::Node& n) {
  if (!n.IsScalar()) throw ValidationError(key + ": expected a scalar value");
  return n.Scalar();
}

template <typename T>
T as_int(const std::string& key, const YAML::Node& n) {
  const auto s = scalar(key, n);
  T v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ValidationError(key + ": expected an integer, got '" + s + "'");
  return v;
}

double as_double(const std::string& key, const YAML::Node& n) {
  const auto s = scalar(key, n);
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ValidationError(key + ": expected a number, got '" + s + "'");
  return v;
}

bool as_bool(const std::string& key, const YAML::Node& n) {
  const auto s = scalar(key, n);
  if (s == "true" || s == "True" || s == "yes") return true;
  if (s == "false" || s == "False" || s == "no") return false;
  throw ValidationError(key + ": expected true or false, got '" + s + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, p);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const YAML::Node&)> set;
  std::function<YAML::Node(const RunConfig&)> get;
};

#define TL_INT(KEY, EXPR)                                                                                  \
  Field {                                                                                                  \
    KEY, [](RunConfig& c, const YAML::Node& n) { c.EXPR = as_int<std::decay_t<decltype(c.EXPR)>>(KEY, n); }, \
        [](const RunConfig& c) { return YAML::Node(std::to_string(c.EXPR)); }                              \
  }
#define TL_DOUBLE(KEY, EXPR)                                                               \
  Field {                                                                                  \
    KEY, [](RunConfig& c, const YAML::Node& n) { c.EXPR = as_double(KEY, n); },            \
        [](const RunConfig& c) { return YAML::Node(fmt_double(c.EXPR)); }                  \
  }
#define TL_BOOL(KEY, EXPR)                                                                 \
  Field {                                                                                  \
    KEY, [](RunConfig& c, const YAML::Node& n) { c.EXPR = as_bool(KEY, n); },              \
        [](const RunConfig& c) { return YAML::Node(c.EXPR ? "true" : "false"); }           \
  }
#define TL_STRING(KEY, EXPR)                                                               \
  Field {                                                                                  \
    KEY, [](RunConfig& c, const YAML::Node& n) { c.EXPR = n.IsNull() ? "" : scalar(KEY, n); }, \
        [](const RunConfig& c) { return YAML::Node(c.EXPR); }                              \
  }
#define TL_ENUM(KEY, EXPR, TABLE)                                                          \
  Field {                                                                                  \
    KEY, [](RunConfig& c, const YAML::Node& n) { c.EXPR = TABLE.parse(KEY, scalar(KEY, n)); }, \
        [](const RunConfig& c) { return YAML::Node(TABLE.name(c.EXPR)); }                  \
  }
#define TL_POOL(KEY, EXPR)                                                                 \
  Field {                                                                                  \
    KEY,                                                                                   \
        [](RunConfig& c, const YAML::Node& n) {                                            \
          if (!n.IsSequence()) throw ValidationError(std::string(KEY) + ": expected a list"); \
          c.EXPR.clear();                                                                  \
          for (const auto& e : n) c.EXPR.push_back(kGranularities.parse(KEY, scalar(KEY, e))); \
        },                                                                                 \
        [](const RunConfig& c) {                                                           \
          YAML::Node seq(YAML::NodeType::Sequence);                                        \
          for (auto g : c.EXPR) seq.push_back(kGranularities.name(g));                     \
          seq.SetStyle(YAML::EmitterStyle::Flow);                                          \
          return seq;                                                                      \
        }                                                                                  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      TL_INT("schema_version", schema_version),
      TL_STRING("name", name),
      TL_ENUM("mode", mode, kModes),
      TL_ENUM("patch_objective", patch_objective, kObjectives),
      TL_DOUBLE("mask_ratio", mask_ratio),
      TL_INT("local_crops", local_crops),
      TL_INT("steps", steps),
      TL_INT("batch_size", batch_size),
      TL_INT("seed", seed),
      TL_INT("threads", threads),
      TL_INT("checkpoint_every", checkpoint_every),
      TL_STRING("teacher_checkpoint", teacher_checkpoint),
      TL_DOUBLE("student_temperature", student_temperature),
      TL_DOUBLE("teacher_temperature", teacher_temperature),
      TL_DOUBLE("center_momentum", center_momentum),
      TL_DOUBLE("logit_scale_init", logit_scale_init),
      TL_DOUBLE("logit_scale_max", logit_scale_max),
      TL_ENUM("ema.scope", ema.scope, kScopes),
      TL_DOUBLE("ema.momentum", ema.momentum),
      TL_ENUM("ema.schedule", ema.schedule, kSchedules),
      TL_BOOL("ema.allow_experimental_shared", ema.allow_experimental_shared),
      TL_ENUM("caption_strategy.mode", caption_strategy.mode, kCaptionModes),
      TL_POOL("caption_strategy.pool1", caption_strategy.pool1),
      TL_POOL("caption_strategy.pool2", caption_strategy.pool2),
      TL_DOUBLE("loss_weights.alpha", loss_weights.alpha),
      TL_DOUBLE("loss_weights.beta", loss_weights.beta),
      TL_INT("resolutions.stage1_global", resolutions.stage1_global),
      TL_INT("resolutions.stage1_local", resolutions.stage1_local),
      TL_INT("resolutions.stage2_global", resolutions.stage2_global),
      TL_INT("resolutions.stage2_local", resolutions.stage2_local),
      TL_INT("resolutions.switch_step", resolutions.switch_step),
      TL_STRING("optimizer.name", optimizer.name),
      TL_DOUBLE("optimizer.lr", optimizer.lr),
      TL_DOUBLE("optimizer.min_lr", optimizer.min_lr),
      TL_DOUBLE("optimizer.warmup_fraction", optimizer.warmup_fraction),
      TL_DOUBLE("optimizer.weight_decay", optimizer.weight_decay),
      TL_DOUBLE("optimizer.beta1", optimizer.beta1),
      TL_DOUBLE("optimizer.beta2", optimizer.beta2),
      TL_DOUBLE("optimizer.eps", optimizer.eps),
      TL_ENUM("init.student_encoder", init.student_encoder, kInit),
      TL_ENUM("init.text", init.text, kInit),
      TL_BOOL("init.text_frozen", init.text_frozen),
      TL_STRING("init.checkpoint", init.checkpoint),
      TL_INT("model.image.patch_size", model.image.patch_size),
      TL_INT("model.image.embed_dim", model.image.embed_dim),
      TL_INT("model.image.depth", model.image.depth),
      TL_INT("model.image.heads", model.image.heads),
      TL_INT("model.image.mlp_ratio", model.image.mlp_ratio),
      TL_INT("model.image.proj_dim", model.image.proj_dim),
      TL_INT("model.text.embed_dim", model.text.embed_dim),
      TL_INT("model.text.depth", model.text.depth),
      TL_INT("model.text.heads", model.text.heads),
      TL_INT("model.text.mlp_ratio", model.text.mlp_ratio),
      TL_INT("model.text.max_len", model.text.max_len),
      TL_INT("model.text.proj_dim", model.text.proj_dim),
      TL_INT("model.head.in_dim", model.head.in_dim),
      TL_INT("model.head.hidden_dim", model.head.hidden_dim),
      TL_INT("model.head.bottleneck_dim", model.head.bottleneck_dim),
      TL_INT("model.head.prototypes", model.head.prototypes),
      TL_STRING("data.dir", data.dir),
      TL_DOUBLE("data.holdout_fraction", data.holdout_fraction),
      TL_INT("data.count", data.count),
      TL_INT("data.canvas", data.canvas),
      TL_INT("data.seed", data.seed),
      TL_INT("eval.knn_k", eval.knn_k),
      TL_INT("eval.gallery_size", eval.gallery_size),
      TL_INT("eval.query_size", eval.query_size),
      TL_INT("eval.probe_train_images", eval.probe_train_images),
      TL_DOUBLE("eval.probe_l2", eval.probe_l2),
      TL_INT("eval.pca_images", eval.pca_images),
      TL_STRING("eval.retrieval_caption", eval.retrieval_caption),
      TL_STRING("eval.prompt_template", eval.prompt_template),
  };
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

const Field& require_field(const std::string& key) {
  const auto* f = find_field(key);
  if (!f) throw ValidationError("unknown config key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  return *f;
}

void flatten(const YAML::Node& node, const std::string& prefix, std::vector<std::pair<std::string, YAML::Node>>& out) {
  for (const auto& kv : node) {
    const auto key = prefix + kv.first.as<std::string>();
    const auto& v = kv.second;
    if (v.IsMap()) {
      if (!find_field(key)) {
        flatten(v, key + ".", out);
        continue;
      }
    }
    out.emplace_back(key, v);
  }
}

void apply(RunConfig& c, const std::string& key, const YAML::Node& value, std::set<std::string>& seen) {
  require_field(key).set(c, value);
  seen.insert(key);
}

}  // namespace

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& f : fields()) {
    const auto d = edit_distance(key, f.key);
    if (d < best_d) {
      best_d = d;
      best = f.key;
    }
  }
  return best;
}

trainer::RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("config is not valid YAML: ") + e.what());
  }
  if (!root.IsNull() && !root.IsMap()) throw ValidationError("config document must be a mapping");

  std::vector<std::pair<std::string, YAML::Node>> entries;
  if (root.IsMap()) flatten(root, "", entries);
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + ov + "' is not of the form key=value");
    YAML::Node value;
    try {
      value = YAML::Load(ov.substr(eq + 1));
    } catch (const YAML::Exception&) {
      value = YAML::Node(ov.substr(eq + 1));
    }
    entries.emplace_back(ov.substr(0, eq), value);
  }

  RunConfig c;
  std::set<std::string> seen;
  // caption pools follow the mode unless given explicitly
  for (const auto& [k, v] : entries) {
    if (k == "caption_strategy.mode") apply(c, k, v, seen);
  }
  c.caption_strategy = objectives::CaptionStrategy::defaults(c.caption_strategy.mode);
  for (const auto& [k, v] : entries) apply(c, k, v, seen);
  if (c.schema_version != kSchemaVersion) {
    throw ValidationError("schema_version: unsupported value " + std::to_string(c.schema_version) + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
  }
  c.validate();
  return c;
}

trainer::RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

std::string serialize_config(const trainer::RunConfig& config) {
  YAML::Node root(YAML::NodeType::Map);
  for (const auto& f : fields()) {
    std::vector<std::string> parts;
    std::stringstream ks(f.key);
    for (std::string p; std::getline(ks, p, '.');) parts.push_back(p);
    YAML::Node node = root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node[parts[i]]) node[parts[i]] = YAML::Node(YAML::NodeType::Map);
      node.reset(node[parts[i]]);
    }
    node[parts.back()] = f.get(config);
  }
  YAML::Emitter em;
  em << root;
  return std::string(em.c_str()) + "\n";
}

}  // namespace tipslab::config
