#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmshare/autodiff.hpp"
#include "mmshare/rng.hpp"
#include "mmshare/tensor.hpp"

namespace mmshare {

enum class Modality { Image = 0, Text = 1 };
inline constexpr std::array<Modality, 2> kModalities{Modality::Image, Modality::Text};

enum class IdentifierKind { None, FeatureVector, Token };

std::string_view to_string(Modality m);
std::string_view to_string(IdentifierKind k);
IdentifierKind parse_identifier_kind(std::string_view text);

using TokenSequence = std::vector<std::int32_t>;

/// Width of the modality feature vector for a model of width d when none is
/// given: 20 of every 768 features, rounded, at least 1.
Index default_modality_dim(Index d_model);

/// Architecture of one encoder model. `d_model` is the encoder width d; under
/// IdentifierKind::FeatureVector the content embedders produce d - modality_dim
/// features and the modality vector fills the rest.
struct ModelConfig {
  Index d_model = 64;
  IdentifierKind identifier = IdentifierKind::None;
  Index modality_dim = 0;
  Index n_heads = 4;
  Index mlp_ratio = 4;
  Index early_layers = 0;
  Index shared_layers = 4;
  Index late_layers = 0;
  Index proj_dim = 64;
  Index vocab_size = 30;
  Index max_seq_len = 12;
  Index image_size = 32;
  Index patch_size = 8;
  Index channels = 3;
  double init_temperature = 0.07;

  Index content_dim() const { return d_model - modality_dim; }
  Index num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  Index patch_dim() const { return patch_size * patch_size * channels; }

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Per-modality view of the identifier settings.
struct ModalitySpec {
  Modality modality = Modality::Image;
  IdentifierKind identifier = IdentifierKind::None;
  Index content_dim = 0;  // d_e
  Index modality_dim = 0; // d_m

  Index width() const { return content_dim + modality_dim; }
};

/// Rejects a set of modality specs whose encoder widths differ, or whose
/// identifier settings are inconsistent (d_m > 0 iff FeatureVector).
void check_modality_specs(std::span<const ModalitySpec> specs);

/// Exact number of scalars in one pre-layernorm transformer block.
Index transformer_layer_param_count(Index d, Index mlp_ratio);

enum class ParamGroup { Embedders, Identifiers, Early, Shared, Late, Projection, Temperature };
std::string_view to_string(ParamGroup g);

struct ParamBreakdown {
  Index embedders = 0;
  Index identifiers = 0;
  Index early = 0;
  Index shared = 0;
  Index late = 0;
  Index projection = 0;
  Index temperature = 0;

  Index total() const { return embedders + identifiers + early + shared + late + projection + temperature; }
  /// Count used for budget matching; identifier parameters are excluded.
  Index matched_total() const { return total() - identifiers; }
  Index modality_specific() const { return early + late; }
};

/// Ordered, named parameter storage. Addresses are stable for the store's
/// lifetime.
template <typename Scalar>
class ParameterStore {
 public:
  struct Entry {
    std::unique_ptr<Parameter<Scalar>> param;
    ParamGroup group;
  };

  Parameter<Scalar>& add(std::string name, Tensor<Scalar> value, ParamGroup group);
  Parameter<Scalar>* find(std::string_view name);
  const Parameter<Scalar>* find(std::string_view name) const;
  Parameter<Scalar>& at(std::string_view name);
  const Parameter<Scalar>& at(std::string_view name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

/// Parameter counts by group over a store.
template <typename Scalar>
ParamBreakdown count_params(const ParameterStore<Scalar>& store);

/// Parameters of one pre-layernorm transformer block.
template <typename Scalar>
struct TransformerLayer {
  Parameter<Scalar>* ln1_gain;
  Parameter<Scalar>* ln1_bias;
  Parameter<Scalar>* wq;
  Parameter<Scalar>* bq;
  Parameter<Scalar>* wk;
  Parameter<Scalar>* bk;
  Parameter<Scalar>* wv;
  Parameter<Scalar>* bv;
  Parameter<Scalar>* wo;
  Parameter<Scalar>* bo;
  Parameter<Scalar>* ln2_gain;
  Parameter<Scalar>* ln2_bias;
  Parameter<Scalar>* w1;
  Parameter<Scalar>* b1;
  Parameter<Scalar>* w2;
  Parameter<Scalar>* b2;
};

/// x + attn(LN1(x)), then + MLP(LN2(x)); shape preserved.
template <typename Scalar>
Var<Scalar> transformer_block(Tape<Scalar>& tape, const TransformerLayer<Scalar>& layer, const Var<Scalar>& x,
                              Index seq_len, Index n_heads);

/// Splits a channels x size x size image into non-overlapping patches, one row
/// per patch in row-major patch order. Within a row, features are ordered
/// (channel, dy, dx).
template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<Scalar>& image, Index patch_size);

/// Shared-encoder multimodal model: per-modality embedders and identifiers,
/// optional modality-specific stacks before (early) and after (late) one
/// shared stack, CLS pooling and a shared projection head.
///
/// All forward methods take packed batches: B sequences of equal length
/// stacked as (B * seq_len) x width rows.
template <typename Scalar>
class EncoderModel {
 public:
  EncoderModel(ModelConfig config, std::uint64_t seed);
  EncoderModel(ModelConfig config, std::vector<ModalitySpec> specs, std::uint64_t seed);

  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;
  EncoderModel(EncoderModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const ModalitySpec& spec(Modality m) const { return specs_[static_cast<std::size_t>(m)]; }
  ParameterStore<Scalar>& parameters() { return store_; }
  const ParameterStore<Scalar>& parameters() const { return store_; }

  /// Token + positional embeddings: (B * s) x d_e.
  Var<Scalar> embed_text(Tape<Scalar>& tape, std::span<const TokenSequence> captions);
  /// Patch projection + positional embeddings: (B * num_patches) x d_e.
  Var<Scalar> embed_image(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> images);

  /// Appends the modality vector to every row: rows x d_e -> rows x d.
  Var<Scalar> attach_modality_vector(Tape<Scalar>& tape, const Var<Scalar>& seq, Modality m);

  /// [CLS, (modality token), tokens...] per sequence. The CLS row gets the
  /// modality vector too under FeatureVector.
  Var<Scalar> prepend_cls_and_modality_token(Tape<Scalar>& tape, const Var<Scalar>& seq, Index seq_len,
                                             Modality m);

  /// Full input sequence h0 for a batch, (B * s') x d.
  Var<Scalar> input_sequence(Tape<Scalar>& tape, std::span<const TokenSequence> captions);
  Var<Scalar> input_sequence(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> images);

  /// psi_M(shared(phi_M(h0))).
  Var<Scalar> encode(Tape<Scalar>& tape, const Var<Scalar>& h0, Index seq_len, Modality m);

  /// Unit-norm projection of every CLS row: B x d_proj.
  Var<Scalar> pool_and_project(Tape<Scalar>& tape, const Var<Scalar>& encoded, Index seq_len);

  /// End-to-end embeddings z for a batch.
  Var<Scalar> embed(Tape<Scalar>& tape, std::span<const TokenSequence> captions);
  Var<Scalar> embed(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> images);

  /// Sequence length s' entering the encoder for a content length s.
  Index encoder_length(Modality m, Index content_len) const;
  /// Default content length s: num_patches for images, max_seq_len for text.
  Index content_length(Modality m) const;

  Var<Scalar> log_temperature(Tape<Scalar>& tape) { return tape.param(*log_tau_); }
  Scalar temperature() const;

  const std::vector<TransformerLayer<Scalar>>& shared_layers() const { return shared_; }
  const std::vector<TransformerLayer<Scalar>>& early_layers(Modality m) const {
    return early_[static_cast<std::size_t>(m)];
  }
  const std::vector<TransformerLayer<Scalar>>& late_layers(Modality m) const {
    return late_[static_cast<std::size_t>(m)];
  }

  ParamBreakdown count_params() const { return mmshare::count_params(store_); }

  /// Copies every parameter value from a model with identical names/shapes
  /// (typically another scalar type).
  template <typename Other>
  void copy_values_from(const EncoderModel<Other>& other);

 private:
  struct Embedder {
    Parameter<Scalar>* content = nullptr;    // token table or patch projection
    Parameter<Scalar>* position = nullptr;   // one row per content position
    Parameter<Scalar>* cls_position = nullptr;
    Parameter<Scalar>* modality_vector = nullptr;
    Parameter<Scalar>* modality_token = nullptr;
  };

  void build(std::uint64_t seed);
  std::vector<TransformerLayer<Scalar>> make_stack(const std::string& prefix, Index count, ParamGroup group,
                                                   Rng& rng);
  Var<Scalar> run_stack(Tape<Scalar>& tape, const std::vector<TransformerLayer<Scalar>>& stack, Var<Scalar> x,
                        Index seq_len);
  const Embedder& embedder(Modality m) const { return embedders_[static_cast<std::size_t>(m)]; }

  ModelConfig config_;
  std::array<ModalitySpec, 2> specs_;
  ParameterStore<Scalar> store_;
  std::array<Embedder, 2> embedders_{};
  Parameter<Scalar>* cls_ = nullptr;
  Parameter<Scalar>* projection_ = nullptr;
  Parameter<Scalar>* log_tau_ = nullptr;
  std::array<std::vector<TransformerLayer<Scalar>>, 2> early_;
  std::vector<TransformerLayer<Scalar>> shared_;
  std::array<std::vector<TransformerLayer<Scalar>>, 2> late_;
};

template <typename Scalar>
template <typename Other>
void EncoderModel<Scalar>::copy_values_from(const EncoderModel<Other>& other) {
  for (const auto& e : store_.entries()) {
    const auto& src = other.parameters().at(e.param->name);
    if (src.value.shape() != e.param->value.shape()) {
      throw DimensionError("copy_values_from: shape mismatch for " + e.param->name);
    }
    e.param->value = src.value.template cast<Scalar>();
  }
}

/// Exact trainable-scalar count of a store, split by group.
template <typename Scalar>
ParamBreakdown count_params(const ParameterStore<Scalar>& store) {
  ParamBreakdown b;
  for (const auto& e : store.entries()) {
    const Index n = e.param->value.size();
    switch (e.group) {
      case ParamGroup::Embedders: b.embedders += n; break;
      case ParamGroup::Identifiers: b.identifiers += n; break;
      case ParamGroup::Early: b.early += n; break;
      case ParamGroup::Shared: b.shared += n; break;
      case ParamGroup::Late: b.late += n; break;
      case ParamGroup::Projection: b.projection += n; break;
      case ParamGroup::Temperature: b.temperature += n; break;
    }
  }
  return b;
}

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class EncoderModel<float>;
extern template class EncoderModel<double>;

}  // namespace mmshare
