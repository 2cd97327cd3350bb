#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmshare/config.hpp"
#include "mmshare/data.hpp"
#include "mmshare/model.hpp"

namespace mmshare {

enum class Direction { ImageToText, TextToImage };
std::string_view to_string(Direction d);

/// Recall@k for one retrieval direction.
struct RetrievalReport {
  Direction direction = Direction::ImageToText;
  std::vector<Index> ks;
  std::vector<double> recall;  // recall[i] is Recall@ks[i]
  std::size_t n_queries = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  double train_fraction = 1.0;

  double at(Index k) const;
};

/// 1-based rank of candidate i in row i of a square similarity matrix:
/// descending similarity, ties broken by ascending candidate index.
Index diagonal_rank(const TensorF& similarity, Index row);

/// Fraction of rows whose matching column ranks within the top k.
/// Requires a square matrix and 1 <= k <= columns.
double recall_at_k(const TensorF& similarity, Index k);

/// Unit-norm embeddings for every example of a split, in split order.
TensorF embed_split(EncoderModel<float>& model, const Dataset& data, Split split, Modality modality,
                    std::size_t chunk = 128);

/// Image-to-text uses S = Z_image Z_text^T, text-to-image uses S^T. k values
/// larger than the split size report 1.
std::array<RetrievalReport, 2> evaluate_retrieval(EncoderModel<float>& model, const Dataset& data, Split split,
                                                  std::span<const Index> ks);

struct TrainResult {
  EncoderModel<float> model;
  std::vector<double> loss_trace;  // one entry per step
};

struct TrainOptions {
  /// Written after the last step when non-empty.
  std::filesystem::path checkpoint_path;
  /// Called every eval_every steps (if eval_every > 0) with the step number.
  std::function<void(std::size_t step, EncoderModel<float>&)> on_eval;
};

/// Mini-batch contrastive training with Adam. Deterministic given the config.
/// Throws DivergenceError when the loss stops being finite.
TrainResult train(const TrainConfig& config, const Dataset& data, const TrainOptions& options = {});

/// Dataset named by a config: generate(data_size, data_seed), then subsample
/// to train_fraction with the same data seed.
Dataset dataset_for(const TrainConfig& config);

}  // namespace mmshare
