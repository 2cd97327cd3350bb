#include "mmshare/train.hpp"

#include <algorithm>
#include <cmath>

#include "mmshare/checkpoint.hpp"
#include "mmshare/objective.hpp"
#include "mmshare/optim.hpp"
#include "mmshare/rng.hpp"

namespace mmshare {

std::string_view to_string(Direction d) { return d == Direction::ImageToText ? "I2T" : "T2I"; }

double RetrievalReport::at(Index k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw InputError("report has no recall@" + std::to_string(k));
}

Index diagonal_rank(const TensorF& similarity, Index row) {
  const auto s = similarity.matrix();
  const float target = s(row, row);
  Index rank = 1;
  for (Index j = 0; j < s.cols(); ++j) {
    if (j == row) continue;
    if (s(row, j) > target || (s(row, j) == target && j < row)) ++rank;
  }
  return rank;
}

double recall_at_k(const TensorF& similarity, Index k) {
  if (similarity.rank() != 2 || similarity.rows() != similarity.cols()) {
    throw InputError("recall_at_k: expected a square similarity matrix, got " + shape_string(similarity.shape()));
  }
  const Index n = similarity.rows();
  if (k < 1 || k > n) throw InputError("recall_at_k: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  Index hits = 0;
  for (Index i = 0; i < n; ++i)
    if (diagonal_rank(similarity, i) <= k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(n);
}

TensorF embed_split(EncoderModel<float>& model, const Dataset& data, Split split, Modality modality,
                    std::size_t chunk) {
  const auto& idx = data.indices(split);
  if (idx.empty()) throw InputError("split '" + std::string(to_string(split)) + "' is empty");
  TensorF out({static_cast<Index>(idx.size()), model.config().proj_dim});
  for (std::size_t begin = 0; begin < idx.size(); begin += chunk) {
    const std::size_t end = std::min(idx.size(), begin + chunk);
    Tape<float> tape;
    Var<float> z;
    if (modality == Modality::Image) {
      std::vector<TensorF> images;
      for (std::size_t i = begin; i < end; ++i) images.push_back(data.at(idx[i]).image);
      z = model.embed(tape, std::span<const TensorF>(images));
    } else {
      std::vector<TokenSequence> captions;
      for (std::size_t i = begin; i < end; ++i) captions.push_back(data.at(idx[i]).caption);
      z = model.embed(tape, std::span<const TokenSequence>(captions));
    }
    out.matrix().middleRows(static_cast<Index>(begin), static_cast<Index>(end - begin)) = z.value().matrix();
  }
  return out;
}

std::array<RetrievalReport, 2> evaluate_retrieval(EncoderModel<float>& model, const Dataset& data, Split split,
                                                  std::span<const Index> ks) {
  const TensorF zi = embed_split(model, data, split, Modality::Image);
  const TensorF zt = embed_split(model, data, split, Modality::Text);
  const TensorF s_i2t = TensorF::from_matrix(zi.matrix() * zt.matrix().transpose());
  const TensorF s_t2i = TensorF::from_matrix(s_i2t.matrix().transpose());
  const Index n = s_i2t.rows();

  std::array<RetrievalReport, 2> reports;
  reports[0].direction = Direction::ImageToText;
  reports[1].direction = Direction::TextToImage;
  for (auto& r : reports) {
    const TensorF& s = r.direction == Direction::ImageToText ? s_i2t : s_t2i;
    r.n_queries = static_cast<std::size_t>(n);
    for (Index k : ks) {
      if (k < 1) throw InputError("k must be >= 1, got " + std::to_string(k));
      r.ks.push_back(k);
      r.recall.push_back(k >= n ? 1.0 : recall_at_k(s, k));
    }
  }
  return reports;
}

Dataset dataset_for(const TrainConfig& config) {
  Dataset full = generate_dataset(config.data_size, config.data_seed);
  return config.train_fraction < 1.0 ? subsample(full, config.train_fraction, config.data_seed) : full;
}

namespace {

constexpr std::uint64_t kBatchSalt = 0x7f4a7c159e3779b9ULL;

/// Epoch-wise shuffled mini-batches over the training split.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> pool, std::size_t batch, std::uint64_t seed)
      : pool_(std::move(pool)), batch_(batch), rng_(seed ^ kBatchSalt) {
    rng_.shuffle(pool_);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (cursor_ == pool_.size()) {
        rng_.shuffle(pool_);
        cursor_ = 0;
      }
      out.push_back(pool_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> pool_;
  std::size_t batch_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, const TrainOptions& options) {
  config.validate();
  if (data.train.size() < 2) throw ConfigError("training split needs at least 2 pairs, has " + std::to_string(data.train.size()));
  const std::size_t batch = std::min(config.batch_size, data.train.size());

  TrainResult result{EncoderModel<float>(config.model, config.seed), {}};
  EncoderModel<float>& model = result.model;
  Adam<float> adam(model.parameters(), config.adam);
  BatchSampler sampler(data.train, batch, config.seed);
  result.loss_trace.reserve(config.steps);

  std::vector<TensorF> images;
  std::vector<TokenSequence> captions;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    images.clear();
    captions.clear();
    for (std::size_t i : sampler.next()) {
      images.push_back(data.at(i).image);
      captions.push_back(data.at(i).caption);
    }
    Tape<float> tape;
    Var<float> loss;
    try {
      const Var<float> zi = model.embed(tape, std::span<const TensorF>(images));
      const Var<float> zt = model.embed(tape, std::span<const TokenSequence>(captions));
      loss = contrastive_loss(zi, zt, model.log_temperature(tape));
    } catch (const DomainError& e) {
      throw DivergenceError("forward pass broke down at step " + std::to_string(step) + " (lr " +
                            format_double(config.adam.lr) + "): " + e.what());
    }
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw DivergenceError("loss became non-finite at step " + std::to_string(step) + " (lr " +
                            format_double(config.adam.lr) + ")");
    }
    result.loss_trace.push_back(value);
    model.parameters().zero_grad();
    tape.backward(loss);
    adam.step();
    if (config.eval_every > 0 && step % config.eval_every == 0 && options.on_eval) options.on_eval(step, model);
  }
  if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, config, model);
  return result;
}

}  // namespace mmshare
