#include "mmshare/model.hpp"

#include <cmath>
#include <string>

#include "mmshare/rng.hpp"

namespace mmshare {

std::string_view to_string(Modality m) { return m == Modality::Image ? "image" : "text"; }

std::string_view to_string(IdentifierKind k) {
  switch (k) {
    case IdentifierKind::None: return "none";
    case IdentifierKind::FeatureVector: return "vector";
    case IdentifierKind::Token: return "token";
  }
  return "?";
}

IdentifierKind parse_identifier_kind(std::string_view text) {
  if (text == "none") return IdentifierKind::None;
  if (text == "vector" || text == "feature_vector") return IdentifierKind::FeatureVector;
  if (text == "token") return IdentifierKind::Token;
  throw ConfigError("identifier: expected none, vector or token, got '" + std::string(text) + "'");
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Embedders: return "embedders";
    case ParamGroup::Identifiers: return "identifiers";
    case ParamGroup::Early: return "early";
    case ParamGroup::Shared: return "shared";
    case ParamGroup::Late: return "late";
    case ParamGroup::Projection: return "projection";
    case ParamGroup::Temperature: return "temperature";
  }
  return "?";
}

Index default_modality_dim(Index d_model) {
  const auto scaled = static_cast<Index>(std::lround(20.0 / 768.0 * static_cast<double>(d_model)));
  return std::max<Index>(1, scaled);
}

Index transformer_layer_param_count(Index d, Index mlp_ratio) {
  const Index hidden = mlp_ratio * d;
  const Index attention = 4 * d * d + 4 * d;
  const Index mlp = d * hidden + hidden + hidden * d + d;
  const Index norms = 4 * d;
  return attention + mlp + norms;
}

namespace {

void require_positive(const char* field, Index value) {
  if (value < 1) throw ConfigError(std::string(field) + ": must be >= 1, got " + std::to_string(value));
}

void require_non_negative(const char* field, Index value) {
  if (value < 0) throw ConfigError(std::string(field) + ": must be >= 0, got " + std::to_string(value));
}

}  // namespace

void ModelConfig::validate() const {
  require_positive("d_model", d_model);
  require_positive("n_heads", n_heads);
  require_positive("mlp_ratio", mlp_ratio);
  require_positive("proj_dim", proj_dim);
  require_positive("vocab_size", vocab_size);
  require_positive("max_seq_len", max_seq_len);
  require_positive("image_size", image_size);
  require_positive("patch_size", patch_size);
  require_positive("channels", channels);
  require_non_negative("early_layers", early_layers);
  require_non_negative("shared_layers", shared_layers);
  require_non_negative("late_layers", late_layers);
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads: d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads));
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("patch_size: image_size " + std::to_string(image_size) + " is not divisible by " +
                      std::to_string(patch_size));
  }
  if (identifier == IdentifierKind::FeatureVector) {
    if (modality_dim < 1) throw ConfigError("modality_dim: must be >= 1 when identifier = vector");
    if (modality_dim >= d_model) throw ConfigError("modality_dim: must be smaller than d_model");
  } else if (modality_dim != 0) {
    throw ConfigError("modality_dim: must be 0 unless identifier = vector");
  }
  if (!(init_temperature > 0.0)) throw ConfigError("init_temperature: must be > 0");
}

void check_modality_specs(std::span<const ModalitySpec> specs) {
  if (specs.empty()) throw ConfigError("model needs at least one modality");
  for (const auto& s : specs) {
    if (s.content_dim < 1) throw ConfigError(std::string(to_string(s.modality)) + ": content_dim must be >= 1");
    if (s.identifier == IdentifierKind::FeatureVector && s.modality_dim < 1) {
      throw ConfigError(std::string(to_string(s.modality)) + ": feature-vector identifier needs modality_dim >= 1");
    }
    if (s.identifier != IdentifierKind::FeatureVector && s.modality_dim != 0) {
      throw ConfigError(std::string(to_string(s.modality)) + ": modality_dim must be 0 without a feature vector");
    }
    if (s.width() != specs.front().width()) {
      throw ConfigError("encoder width must be consistent across modalities: " +
                        std::string(to_string(specs.front().modality)) + " has " +
                        std::to_string(specs.front().width()) + ", " + std::string(to_string(s.modality)) +
                        " has " + std::to_string(s.width()));
    }
  }
}

// ---------------------------------------------------------------------------
// ParameterStore

template <typename Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::add(std::string name, Tensor<Scalar> value, ParamGroup group) {
  if (find(name)) throw ContractError("duplicate parameter name " + name);
  entries_.push_back({std::make_unique<Parameter<Scalar>>(std::move(name), std::move(value)), group});
  return *entries_.back().param;
}

template <typename Scalar>
Parameter<Scalar>* ParameterStore<Scalar>::find(std::string_view name) {
  for (auto& e : entries_)
    if (e.param->name == name) return e.param.get();
  return nullptr;
}

template <typename Scalar>
const Parameter<Scalar>* ParameterStore<Scalar>::find(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->find(name);
}

template <typename Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ContractError("no parameter named " + std::string(name));
}

template <typename Scalar>
const Parameter<Scalar>& ParameterStore<Scalar>::at(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->at(name);
}

template <typename Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& e : entries_) e.param->grad.set_zero();
}

// ---------------------------------------------------------------------------
// Blocks

template <typename Scalar>
Var<Scalar> transformer_block(Tape<Scalar>& tape, const TransformerLayer<Scalar>& layer, const Var<Scalar>& x,
                              Index seq_len, Index n_heads) {
  auto p = [&tape](Parameter<Scalar>* param) { return tape.param(*param); };
  auto linear = [&](const Var<Scalar>& in, Parameter<Scalar>* w, Parameter<Scalar>* b) {
    return add_row(matmul(in, p(w)), p(b));
  };
  const Var<Scalar> a = layernorm_last(x, p(layer.ln1_gain), p(layer.ln1_bias));
  const Var<Scalar> attn = attention(linear(a, layer.wq, layer.bq), linear(a, layer.wk, layer.bk),
                                     linear(a, layer.wv, layer.bv), seq_len, n_heads);
  const Var<Scalar> h = add(x, linear(attn, layer.wo, layer.bo));
  const Var<Scalar> m = layernorm_last(h, p(layer.ln2_gain), p(layer.ln2_bias));
  return add(h, linear(gelu(linear(m, layer.w1, layer.b1)), layer.w2, layer.b2));
}

template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<Scalar>& image, Index patch_size) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw InputError("image must be channels x size x size, got " + shape_string(image.shape()));
  }
  const Index c = image.dim(0), size = image.dim(1);
  if (patch_size < 1 || size % patch_size != 0) {
    throw InputError("image size " + std::to_string(size) + " is not divisible by patch size " +
                     std::to_string(patch_size));
  }
  const Index grid = size / patch_size;
  Tensor<Scalar> out({grid * grid, c * patch_size * patch_size});
  for (Index py = 0; py < grid; ++py)
    for (Index px = 0; px < grid; ++px)
      for (Index ch = 0; ch < c; ++ch)
        for (Index dy = 0; dy < patch_size; ++dy)
          for (Index dx = 0; dx < patch_size; ++dx)
            out(py * grid + px, (ch * patch_size + dy) * patch_size + dx) =
                image[(ch * size + py * patch_size + dy) * size + px * patch_size + dx];
  return out;
}

// ---------------------------------------------------------------------------
// EncoderModel

namespace {

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.normal() * stddev);
  return t;
}

constexpr double kInitStd = 0.02;

std::vector<ModalitySpec> specs_from_config(const ModelConfig& c) {
  std::vector<ModalitySpec> specs;
  for (Modality m : kModalities) specs.push_back({m, c.identifier, c.content_dim(), c.modality_dim});
  return specs;
}

}  // namespace

template <typename Scalar>
EncoderModel<Scalar>::EncoderModel(ModelConfig config, std::uint64_t seed)
    : EncoderModel(config, specs_from_config(config), seed) {}

template <typename Scalar>
EncoderModel<Scalar>::EncoderModel(ModelConfig config, std::vector<ModalitySpec> specs, std::uint64_t seed)
    : config_(std::move(config)) {
  check_modality_specs(specs);
  if (specs.size() != kModalities.size()) throw ConfigError("expected one spec per modality (image, text)");
  for (const auto& s : specs) specs_[static_cast<std::size_t>(s.modality)] = s;
  if (specs_[0].modality != Modality::Image || specs_[1].modality != Modality::Text) {
    throw ConfigError("expected one spec per modality (image, text)");
  }
  config_.validate();
  if (specs_[0].width() != config_.d_model) {
    throw ConfigError("modality width " + std::to_string(specs_[0].width()) + " differs from d_model " +
                      std::to_string(config_.d_model));
  }
  build(seed);
}

template <typename Scalar>
std::vector<TransformerLayer<Scalar>> EncoderModel<Scalar>::make_stack(const std::string& prefix, Index count,
                                                                       ParamGroup group, Rng& rng) {
  const Index d = config_.d_model, hidden = config_.mlp_ratio * d;
  std::vector<TransformerLayer<Scalar>> stack;
  for (Index l = 0; l < count; ++l) {
    const std::string base = prefix + "." + std::to_string(l) + ".";
    auto weight = [&](const char* name, Index in, Index out) {
      return &store_.add(base + name, normal_tensor<Scalar>({in, out}, rng, kInitStd), group);
    };
    auto zeros = [&](const char* name, Index n) { return &store_.add(base + name, Tensor<Scalar>::zeros({n}), group); };
    auto ones = [&](const char* name, Index n) { return &store_.add(base + name, Tensor<Scalar>::ones({n}), group); };
    TransformerLayer<Scalar> layer{};
    layer.ln1_gain = ones("ln1.gain", d);
    layer.ln1_bias = zeros("ln1.bias", d);
    layer.wq = weight("attn.wq", d, d);
    layer.bq = zeros("attn.bq", d);
    layer.wk = weight("attn.wk", d, d);
    layer.bk = zeros("attn.bk", d);
    layer.wv = weight("attn.wv", d, d);
    layer.bv = zeros("attn.bv", d);
    layer.wo = weight("attn.wo", d, d);
    layer.bo = zeros("attn.bo", d);
    layer.ln2_gain = ones("ln2.gain", d);
    layer.ln2_bias = zeros("ln2.bias", d);
    layer.w1 = weight("mlp.w1", d, hidden);
    layer.b1 = zeros("mlp.b1", hidden);
    layer.w2 = weight("mlp.w2", hidden, d);
    layer.b2 = zeros("mlp.b2", d);
    stack.push_back(layer);
  }
  return stack;
}

template <typename Scalar>
void EncoderModel<Scalar>::build(std::uint64_t seed) {
  Rng rng(seed);
  const Index d = config_.d_model;

  for (Modality m : kModalities) {
    const ModalitySpec& s = spec(m);
    const std::string base = "embed." + std::string(to_string(m)) + ".";
    Embedder& e = embedders_[static_cast<std::size_t>(m)];
    if (m == Modality::Text) {
      e.content = &store_.add(base + "tokens", normal_tensor<Scalar>({config_.vocab_size, s.content_dim}, rng, kInitStd),
                              ParamGroup::Embedders);
      e.position = &store_.add(base + "position",
                               normal_tensor<Scalar>({config_.max_seq_len, s.content_dim}, rng, kInitStd),
                               ParamGroup::Embedders);
    } else {
      e.content = &store_.add(base + "patch", normal_tensor<Scalar>({config_.patch_dim(), s.content_dim}, rng, kInitStd),
                              ParamGroup::Embedders);
      e.position = &store_.add(base + "position",
                               normal_tensor<Scalar>({config_.num_patches(), s.content_dim}, rng, kInitStd),
                               ParamGroup::Embedders);
    }
    e.cls_position =
        &store_.add(base + "cls_position", normal_tensor<Scalar>({1, s.content_dim}, rng, kInitStd), ParamGroup::Embedders);
  }
  cls_ = &store_.add("embed.cls", normal_tensor<Scalar>({1, spec(Modality::Image).content_dim}, rng, kInitStd),
                     ParamGroup::Embedders);
  if (spec(Modality::Image).content_dim != spec(Modality::Text).content_dim) {
    throw ConfigError("the shared CLS embedding needs equal content widths across modalities");
  }

  for (Modality m : kModalities) {
    const ModalitySpec& s = spec(m);
    Embedder& e = embedders_[static_cast<std::size_t>(m)];
    const std::string base = "identifier." + std::string(to_string(m)) + ".";
    if (s.identifier == IdentifierKind::FeatureVector) {
      e.modality_vector =
          &store_.add(base + "vector", normal_tensor<Scalar>({1, s.modality_dim}, rng, kInitStd), ParamGroup::Identifiers);
    } else if (s.identifier == IdentifierKind::Token) {
      e.modality_token = &store_.add(base + "token", normal_tensor<Scalar>({1, d}, rng, kInitStd), ParamGroup::Identifiers);
    }
  }

  for (Modality m : kModalities)
    early_[static_cast<std::size_t>(m)] =
        make_stack("early." + std::string(to_string(m)), config_.early_layers, ParamGroup::Early, rng);
  shared_ = make_stack("shared", config_.shared_layers, ParamGroup::Shared, rng);
  for (Modality m : kModalities)
    late_[static_cast<std::size_t>(m)] =
        make_stack("late." + std::string(to_string(m)), config_.late_layers, ParamGroup::Late, rng);

  projection_ = &store_.add("projection", normal_tensor<Scalar>({d, config_.proj_dim}, rng, kInitStd),
                            ParamGroup::Projection);
  log_tau_ = &store_.add("log_temperature",
                         Tensor<Scalar>::scalar(static_cast<Scalar>(std::log(config_.init_temperature))),
                         ParamGroup::Temperature);
}

template <typename Scalar>
Index EncoderModel<Scalar>::content_length(Modality m) const {
  return m == Modality::Image ? config_.num_patches() : config_.max_seq_len;
}

template <typename Scalar>
Index EncoderModel<Scalar>::encoder_length(Modality m, Index content_len) const {
  return content_len + 1 + (spec(m).identifier == IdentifierKind::Token ? 1 : 0);
}

template <typename Scalar>
Scalar EncoderModel<Scalar>::temperature() const {
  return std::exp(log_tau_->value[0]);
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::embed_text(Tape<Scalar>& tape, std::span<const TokenSequence> captions) {
  if (captions.empty()) throw InputError("embed_text: empty batch");
  const Index s = static_cast<Index>(captions.front().size());
  if (s < 1) throw InputError("embed_text: a caption needs at least one token");
  if (s > config_.max_seq_len) {
    throw InputError("embed_text: caption length " + std::to_string(s) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  std::vector<Index> ids, positions;
  ids.reserve(captions.size() * static_cast<std::size_t>(s));
  positions.reserve(ids.capacity());
  for (const auto& caption : captions) {
    if (static_cast<Index>(caption.size()) != s) throw InputError("embed_text: captions in a batch must share a length");
    for (Index i = 0; i < s; ++i) {
      const auto id = caption[static_cast<std::size_t>(i)];
      if (id < 0 || id >= config_.vocab_size) {
        throw InputError("embed_text: token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(config_.vocab_size));
      }
      ids.push_back(id);
      positions.push_back(i);
    }
  }
  const Embedder& e = embedder(Modality::Text);
  return add(gather_rows(tape.param(*e.content), std::move(ids)), gather_rows(tape.param(*e.position), std::move(positions)));
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::embed_image(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> images) {
  if (images.empty()) throw InputError("embed_image: empty batch");
  const Index np = config_.num_patches(), pd = config_.patch_dim();
  const Shape expected{config_.channels, config_.image_size, config_.image_size};
  Tensor<Scalar> patches({static_cast<Index>(images.size()) * np, pd});
  std::vector<Index> positions;
  positions.reserve(static_cast<std::size_t>(patches.rows()));
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].shape() != expected) {
      throw InputError("embed_image: expected image " + shape_string(expected) + ", got " +
                       shape_string(images[b].shape()));
    }
    patches.matrix().middleRows(static_cast<Index>(b) * np, np) = patchify(images[b], config_.patch_size).matrix();
    for (Index i = 0; i < np; ++i) positions.push_back(i);
  }
  const Embedder& e = embedder(Modality::Image);
  return add(matmul(tape.constant(std::move(patches)), tape.param(*e.content)),
             gather_rows(tape.param(*e.position), std::move(positions)));
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::attach_modality_vector(Tape<Scalar>& tape, const Var<Scalar>& seq, Modality m) {
  const ModalitySpec& s = spec(m);
  if (s.identifier != IdentifierKind::FeatureVector || s.modality_dim < 1) {
    throw ConfigError("attach_modality_vector: modality " + std::string(to_string(m)) +
                      " has no feature-vector identifier");
  }
  if (seq.value().cols() != s.content_dim) {
    throw DimensionError("attach_modality_vector: expected rows of width " + std::to_string(s.content_dim) + ", got " +
                         shape_string(seq.shape()));
  }
  const Var<Scalar> v = tape.param(*embedder(m).modality_vector);
  return concat_last(seq, gather_rows(v, std::vector<Index>(static_cast<std::size_t>(seq.value().rows()), 0)));
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::prepend_cls_and_modality_token(Tape<Scalar>& tape, const Var<Scalar>& seq,
                                                                 Index seq_len, Modality m) {
  const ModalitySpec& s = spec(m);
  const Index d = config_.d_model;
  if (seq.value().rank() != 2 || seq.value().cols() != d) {
    throw DimensionError("prepend_cls_and_modality_token: expected rows of width " + std::to_string(d) + ", got " +
                         shape_string(seq.shape()));
  }
  if (seq_len < 1 || seq.value().rows() % seq_len != 0) {
    throw DimensionError("prepend_cls_and_modality_token: rows do not split into sequences of length " +
                         std::to_string(seq_len));
  }
  Var<Scalar> cls = add(tape.param(*cls_), tape.param(*embedder(m).cls_position));
  if (s.identifier == IdentifierKind::FeatureVector) cls = attach_modality_vector(tape, cls, m);

  std::vector<Var<Scalar>> pieces{cls};
  const bool token = s.identifier == IdentifierKind::Token;
  if (token) pieces.push_back(tape.param(*embedder(m).modality_token));
  const Index content_offset = static_cast<Index>(pieces.size());
  pieces.push_back(seq);
  const Var<Scalar> source = concat_rows(std::span<const Var<Scalar>>(pieces));

  const Index batch = seq.value().rows() / seq_len;
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(batch * encoder_length(m, seq_len)));
  for (Index b = 0; b < batch; ++b) {
    order.push_back(0);
    if (token) order.push_back(1);
    for (Index i = 0; i < seq_len; ++i) order.push_back(content_offset + b * seq_len + i);
  }
  return gather_rows(source, std::move(order));
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::input_sequence(Tape<Scalar>& tape, std::span<const TokenSequence> captions) {
  Var<Scalar> content = embed_text(tape, captions);
  if (spec(Modality::Text).identifier == IdentifierKind::FeatureVector)
    content = attach_modality_vector(tape, content, Modality::Text);
  return prepend_cls_and_modality_token(tape, content, static_cast<Index>(captions.front().size()), Modality::Text);
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::input_sequence(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> images) {
  Var<Scalar> content = embed_image(tape, images);
  if (spec(Modality::Image).identifier == IdentifierKind::FeatureVector)
    content = attach_modality_vector(tape, content, Modality::Image);
  return prepend_cls_and_modality_token(tape, content, config_.num_patches(), Modality::Image);
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::run_stack(Tape<Scalar>& tape, const std::vector<TransformerLayer<Scalar>>& stack,
                                            Var<Scalar> x, Index seq_len) {
  for (const auto& layer : stack) x = transformer_block(tape, layer, x, seq_len, config_.n_heads);
  return x;
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::encode(Tape<Scalar>& tape, const Var<Scalar>& h0, Index seq_len, Modality m) {
  if (h0.value().cols() != config_.d_model) {
    throw DimensionError("encode: expected rows of width " + std::to_string(config_.d_model) + ", got " +
                         shape_string(h0.shape()));
  }
  const auto i = static_cast<std::size_t>(m);
  Var<Scalar> x = run_stack(tape, early_[i], h0, seq_len);
  x = run_stack(tape, shared_, x, seq_len);
  return run_stack(tape, late_[i], x, seq_len);
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::pool_and_project(Tape<Scalar>& tape, const Var<Scalar>& encoded, Index seq_len) {
  if (seq_len < 1 || encoded.value().rows() % seq_len != 0) {
    throw DimensionError("pool_and_project: rows do not split into sequences of length " + std::to_string(seq_len));
  }
  std::vector<Index> cls_rows;
  for (Index r = 0; r < encoded.value().rows(); r += seq_len) cls_rows.push_back(r);
  const Var<Scalar> cls = gather_rows(encoded, std::move(cls_rows));
  return l2_normalize_last(matmul(cls, tape.param(*projection_)));
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::embed(Tape<Scalar>& tape, std::span<const TokenSequence> captions) {
  const Var<Scalar> h0 = input_sequence(tape, captions);
  const Index len = encoder_length(Modality::Text, static_cast<Index>(captions.front().size()));
  return pool_and_project(tape, encode(tape, h0, len, Modality::Text), len);
}

template <typename Scalar>
Var<Scalar> EncoderModel<Scalar>::embed(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> images) {
  const Var<Scalar> h0 = input_sequence(tape, images);
  const Index len = encoder_length(Modality::Image, config_.num_patches());
  return pool_and_project(tape, encode(tape, h0, len, Modality::Image), len);
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class EncoderModel<float>;
template class EncoderModel<double>;
template Var<float> transformer_block(Tape<float>&, const TransformerLayer<float>&, const Var<float>&, Index, Index);
template Var<double> transformer_block(Tape<double>&, const TransformerLayer<double>&, const Var<double>&, Index, Index);
template Tensor<float> patchify(const Tensor<float>&, Index);
template Tensor<double> patchify(const Tensor<double>&, Index);

}  // namespace mmshare
