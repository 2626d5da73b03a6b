#include "xlkd/model.hpp"

#include <cmath>

#include "xlkd/errors.hpp"

namespace xlkd {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ContractError("invalid model config: " + m); };
  if (hidden_size <= 0 || num_layers <= 0 || num_heads <= 0) fail("hidden_size, num_layers and num_heads must be positive");
  if (hidden_size % num_heads != 0) {
    fail("hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (feature_dim <= 0) fail("feature_dim must be positive");
  if (max_text_tokens <= 0 || max_image_tokens <= 0) fail("sequence maxima must be positive");
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (num_classes <= 0) fail("num_classes must be positive");
  if (intermediate_size < 0) fail("intermediate_size must be non-negative");
  if (dropout < 0.0 || dropout >= 1.0 || attention_dropout < 0.0 || attention_dropout >= 1.0) {
    fail("dropout rates must lie in [0, 1)");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"hidden_size", c.hidden_size},         {"num_layers", c.num_layers},
       {"num_heads", c.num_heads},             {"intermediate_size", c.intermediate_size},
       {"feature_dim", c.feature_dim},         {"max_text_tokens", c.max_text_tokens},
       {"max_image_tokens", c.max_image_tokens}, {"dropout", c.dropout},
       {"attention_dropout", c.attention_dropout}, {"vocab_size", c.vocab_size},
       {"num_classes", c.num_classes}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.hidden_size = j.value("hidden_size", d.hidden_size);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.intermediate_size = j.value("intermediate_size", d.intermediate_size);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.max_text_tokens = j.value("max_text_tokens", d.max_text_tokens);
  c.max_image_tokens = j.value("max_image_tokens", d.max_image_tokens);
  c.dropout = j.value("dropout", d.dropout);
  c.attention_dropout = j.value("attention_dropout", d.attention_dropout);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.num_classes = j.value("num_classes", d.num_classes);
}

std::size_t WordTagImageTriple::tag_token_count() const {
  std::size_t n = 0;
  for (const auto& t : tags) n += t.size();
  return n;
}

const char* role_name(PositionRole role) {
  switch (role) {
    case PositionRole::ClassificationMarker: return "cls";
    case PositionRole::QuestionWord: return "word";
    case PositionRole::Separator: return "sep";
    case PositionRole::TagSubword: return "tag";
    case PositionRole::ImageRegion: return "region";
    case PositionRole::Padding: return "pad";
  }
  return "?";
}

std::vector<PositionRole> position_roles(const WordTagImageTriple& triple, std::size_t extra_padding) {
  std::vector<PositionRole> roles;
  roles.push_back(PositionRole::ClassificationMarker);
  roles.insert(roles.end(), triple.question.size(), PositionRole::QuestionWord);
  roles.push_back(PositionRole::Separator);
  roles.insert(roles.end(), triple.tag_token_count(), PositionRole::TagSubword);
  roles.push_back(PositionRole::Separator);
  roles.insert(roles.end(), triple.regions.count(), PositionRole::ImageRegion);
  roles.insert(roles.end(), extra_padding, PositionRole::Padding);
  return roles;
}

const Matrix& EncoderOutput::layer(int index) const {
  auto it = layers.find(index);
  if (it == layers.end()) throw ContractError("layer " + std::to_string(index) + " was not retained");
  return it->second;
}

std::vector<int> EncoderOutput::positions(PositionRole role) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == role) out.push_back(static_cast<int>(i));
  return out;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int h = config_.hidden_size, f = config_.ffn_size();
  auto add = [&](std::string name, std::string group, int rows, int cols) {
    params_.push_back({std::move(name), std::move(group), Matrix::Zero(rows, cols)});
  };
  add("embeddings.word", "embeddings", config_.vocab_size, h);
  add("embeddings.position", "embeddings", config_.max_text_tokens, h);
  add("embeddings.segment", "embeddings", 2, h);
  add("embeddings.image.weight", "embeddings", config_.feature_dim, h);
  add("embeddings.image.bias", "embeddings", 1, h);
  add("embeddings.region_position", "embeddings", 1, h);
  add("embeddings.norm.gamma", "embeddings", 1, h);
  add("embeddings.norm.beta", "embeddings", 1, h);
  for (int l = 1; l <= config_.num_layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    for (const char* m : {"query", "key", "value", "output"}) {
      add(p + "attention." + m + ".weight", "encoder", h, h);
      add(p + "attention." + m + ".bias", "encoder", 1, h);
    }
    add(p + "attention.norm.gamma", "encoder", 1, h);
    add(p + "attention.norm.beta", "encoder", 1, h);
    add(p + "ffn.in.weight", "encoder", h, f);
    add(p + "ffn.in.bias", "encoder", 1, f);
    add(p + "ffn.out.weight", "encoder", f, h);
    add(p + "ffn.out.bias", "encoder", 1, h);
    add(p + "ffn.norm.gamma", "encoder", 1, h);
    add(p + "ffn.norm.beta", "encoder", 1, h);
  }
  add("classifier.weight", "classifier", h, config_.num_classes);
  add("classifier.bias", "classifier", 1, config_.num_classes);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::size_t Model::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw ContractError("unknown parameter " + name);
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  Model model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& p : model.parameters()) {
    const bool is_gamma = p.name.ends_with(".gamma");
    const bool is_zero = p.name.ends_with(".bias") || p.name.ends_with(".beta");
    if (is_gamma) {
      p.value.setOnes();
    } else if (!is_zero) {
      p.value = p.value.unaryExpr([&](double) { return normal(rng); });
    }
  }
  return model;
}

std::vector<bool> trainable_mask(const Model& model, std::span<const std::string> frozen) {
  std::vector<bool> mask;
  for (const auto& p : model.parameters()) {
    bool is_frozen = false;
    for (const auto& f : frozen) is_frozen = is_frozen || p.group == f || p.name.starts_with(f);
    mask.push_back(!is_frozen);
  }
  return mask;
}

ModelBinding::ModelBinding(ad::Tape& tape, const Model& model, bool tracked, const std::vector<bool>* trainable)
    : tape_(&tape), model_(&model), tracked_(tracked), trainable_(trainable), leaves_(model.parameters().size()) {}

ad::Var ModelBinding::param(std::size_t index) {
  if (!leaves_[index].valid()) {
    const Matrix* value = &model_->parameters()[index].value;
    const bool track = tracked_ && (trainable_ == nullptr || (*trainable_)[index]);
    leaves_[index] = track ? tape_->parameter(index, value) : tape_->constant_ref(value);
  }
  return leaves_[index];
}

void check_triple(const ModelConfig& config, const WordTagImageTriple& triple) {
  if (triple.text_token_count() > static_cast<std::size_t>(config.max_text_tokens)) {
    throw ContractError("input has " + std::to_string(triple.text_token_count()) + " text tokens, budget is " +
                        std::to_string(config.max_text_tokens));
  }
  if (triple.regions.count() > static_cast<std::size_t>(config.max_image_tokens)) {
    throw ContractError("input has " + std::to_string(triple.regions.count()) + " regions, budget is " +
                        std::to_string(config.max_image_tokens));
  }
  if (triple.regions.count() > 0 && triple.regions.vectors.cols() != config.feature_dim) {
    throw ContractError("region feature dimension " + std::to_string(triple.regions.vectors.cols()) +
                        " does not match feature_dim " + std::to_string(config.feature_dim));
  }
  if (!triple.regions.vectors.allFinite()) throw ContractError("region features contain non-finite values");
}

namespace {

using ad::Var;

Var maybe_dropout(ad::Tape& t, Var x, double rate, const ForwardOptions& opts) {
  if (!opts.training || rate <= 0.0) return x;
  const Matrix& v = t.value(x);
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask(i) = keep(*opts.rng) ? 1.0 / (1.0 - rate) : 0.0;
  return ad::mul_const(t, x, std::move(mask));
}

Var linear(ModelBinding& b, Var x, const std::string& prefix) {
  return ad::add_row(b.tape(), ad::matmul(b.tape(), x, b.param(prefix + ".weight")), b.param(prefix + ".bias"));
}

}  // namespace

ForwardGraph build_forward(ModelBinding& b, const WordTagImageTriple& triple, const ForwardOptions& opts) {
  const ModelConfig& cfg = b.model().config();
  check_triple(cfg, triple);
  for (int l : opts.retain_layers) {
    if (l < 1 || l > cfg.num_layers) throw ContractError("retain layer " + std::to_string(l) + " out of range");
  }
  if (opts.training && opts.rng == nullptr) throw ContractError("training forward requires an RNG");
  ad::Tape& t = b.tape();

  ForwardGraph graph;
  graph.roles = position_roles(triple, opts.extra_padding);

  // Text positions followed by trailing padding, looked up in one pass.
  std::vector<int> ids, pos, seg;
  auto push_token = [&](TokenId id, int segment, int position) {
    if (id < 0 || id >= cfg.vocab_size) throw ContractError("token id " + std::to_string(id) + " outside model vocabulary");
    ids.push_back(id);
    pos.push_back(position);
    seg.push_back(segment);
  };
  const SpecialIds& sp = triple.specials;
  push_token(sp.cls, 0, 0);
  for (const auto& s : triple.question.subwords) push_token(s.id, 0, static_cast<int>(ids.size()));
  push_token(sp.sep, 0, static_cast<int>(ids.size()));
  for (const auto& tag : triple.tags)
    for (const auto& s : tag.subwords) push_token(s.id, 1, static_cast<int>(ids.size()));
  push_token(sp.sep, 1, static_cast<int>(ids.size()));
  const std::size_t text_len = ids.size();
  for (std::size_t i = 0; i < opts.extra_padding; ++i) push_token(sp.pad, 0, 0);

  Var word = ad::gather_rows(t, b.param("embeddings.word"), ids);
  Var emb = ad::add(t, word, ad::gather_rows(t, b.param("embeddings.position"), pos));
  emb = ad::add(t, emb, ad::gather_rows(t, b.param("embeddings.segment"), seg));

  std::vector<Var> parts;
  std::vector<int> text_rows(text_len), pad_rows(opts.extra_padding);
  for (std::size_t i = 0; i < text_len; ++i) text_rows[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < opts.extra_padding; ++i) pad_rows[i] = static_cast<int>(text_len + i);
  parts.push_back(ad::gather_rows(t, emb, text_rows));
  if (triple.regions.count() > 0) {
    Var feats = t.constant_ref(&triple.regions.vectors);
    Var reg = linear(b, feats, "embeddings.image");
    reg = ad::add_row(t, reg, b.param("embeddings.region_position"));
    const int one[] = {1};
    reg = ad::add_row(t, reg, ad::gather_rows(t, b.param("embeddings.segment"), one));
    parts.push_back(reg);
  }
  if (opts.extra_padding > 0) parts.push_back(ad::gather_rows(t, emb, pad_rows));
  Var x = ad::concat_rows(t, parts);
  x = ad::layer_norm(t, x, b.param("embeddings.norm.gamma"), b.param("embeddings.norm.beta"));
  x = maybe_dropout(t, x, cfg.dropout, opts);

  std::vector<std::uint8_t> key_valid(graph.roles.size());
  for (std::size_t i = 0; i < graph.roles.size(); ++i) key_valid[i] = graph.roles[i] != PositionRole::Padding;

  const int heads = cfg.num_heads;
  const int head_dim = cfg.hidden_size / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int l = 1; l <= cfg.num_layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    Var qm = linear(b, x, p + "attention.query");
    Var km = linear(b, x, p + "attention.key");
    Var vm = linear(b, x, p + "attention.value");
    std::vector<Var> contexts;
    for (int h = 0; h < heads; ++h) {
      Var qh = ad::slice_cols(t, qm, h * head_dim, head_dim);
      Var kh = ad::slice_cols(t, km, h * head_dim, head_dim);
      Var vh = ad::slice_cols(t, vm, h * head_dim, head_dim);
      Var scores = ad::scale(t, ad::matmul_nt(t, qh, kh), inv_sqrt);
      Var probs = ad::masked_softmax(t, scores, key_valid);
      probs = maybe_dropout(t, probs, cfg.attention_dropout, opts);
      contexts.push_back(ad::matmul(t, probs, vh));
    }
    Var ctx = heads == 1 ? contexts.front() : ad::concat_cols(t, contexts);
    Var attn = maybe_dropout(t, linear(b, ctx, p + "attention.output"), cfg.dropout, opts);
    x = ad::layer_norm(t, ad::add(t, x, attn), b.param(p + "attention.norm.gamma"), b.param(p + "attention.norm.beta"));
    Var hidden = ad::gelu(t, linear(b, x, p + "ffn.in"));
    Var ffn = maybe_dropout(t, linear(b, hidden, p + "ffn.out"), cfg.dropout, opts);
    x = ad::layer_norm(t, ad::add(t, x, ffn), b.param(p + "ffn.norm.gamma"), b.param(p + "ffn.norm.beta"));
    if (opts.retain_layers.contains(l)) graph.layers[l] = x;
  }
  return graph;
}

ad::Var build_logits(ModelBinding& b, const ForwardGraph& graph) {
  const int last = b.model().config().num_layers;
  auto it = graph.layers.find(last);
  if (it == graph.layers.end()) throw ContractError("classification requires the last layer to be retained");
  const int cls_row[] = {0};
  Var cls = ad::gather_rows(b.tape(), it->second, cls_row);
  return linear(b, cls, "classifier");
}

EncoderOutput forward(const Model& model, const WordTagImageTriple& triple, const ForwardOptions& opts) {
  ad::Tape tape;
  ModelBinding binding(tape, model, false);
  ForwardGraph graph = build_forward(binding, triple, opts);
  EncoderOutput out;
  out.roles = std::move(graph.roles);
  for (const auto& [layer, var] : graph.layers) out.layers.emplace(layer, tape.value(var));
  return out;
}

EncoderOutput forward(const Model& model, const WordTagImageTriple& triple, const std::set<int>& retain_layers) {
  ForwardOptions opts;
  opts.retain_layers = retain_layers;
  return forward(model, triple, opts);
}

Vector classify(const Model& model, const EncoderOutput& out) {
  const Matrix& last = out.layer(model.config().num_layers);
  if (out.roles.empty() || out.roles.front() != PositionRole::ClassificationMarker) {
    throw ContractError("encoder output has no classification marker");
  }
  const Matrix logits = last.row(0) * model.param("classifier.weight") + model.param("classifier.bias");
  return logits.row(0).transpose();
}

GradientResult gradients(const Model& model, const Objective& objective, std::span<const std::string> frozen) {
  GradientResult result;
  result.trainable = trainable_mask(model, frozen);
  ad::Tape tape;
  ModelBinding binding(tape, model, true, &result.trainable);
  Var loss = objective(binding);
  result.loss = tape.scalar(loss);
  if (!std::isfinite(result.loss)) throw NumericError("non-finite loss " + std::to_string(result.loss));
  tape.backward(loss, result.grads);
  const auto& params = model.parameters();
  result.grads.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (result.grads[i].size() == 0 || !result.trainable[i]) {
      result.grads[i] = Matrix::Zero(params[i].value.rows(), params[i].value.cols());
    }
    if (!result.grads[i].allFinite()) throw NumericError("non-finite gradient for " + params[i].name);
  }
  return result;
}

}  // namespace xlkd
