#pragma once

#include <cmath>
#include <string>

#include "mmshare/autodiff.hpp"
#include "mmshare/tensor.hpp"

namespace mmshare {

/// S[i][j] = <z_image[i], z_text[j]>. Rows are expected to be unit-norm, in
/// which case this is the cosine similarity.
template <typename Scalar>
Var<Scalar> cosine_similarity_matrix(const Var<Scalar>& z_image, const Var<Scalar>& z_text) {
  if (z_image.value().rank() != 2 || z_text.value().rank() != 2 || z_image.value().cols() != z_text.value().cols()) {
    throw DimensionError("cosine_similarity_matrix: embedding widths differ, " + shape_string(z_image.shape()) +
                         " vs " + shape_string(z_text.shape()));
  }
  return matmul(z_image, transpose(z_text));
}

/// Symmetric InfoNCE over a batch of N matched pairs with temperature
/// exp(log_tau):
///
///   L = -(1/N) sum_i [ log softmax_j(S/tau)[i][i] + log softmax_j(S^T/tau)[i][i] ]
///
/// The two directional terms are summed inside the 1/N average.
template <typename Scalar>
Var<Scalar> contrastive_loss(const Var<Scalar>& z_image, const Var<Scalar>& z_text, const Var<Scalar>& log_tau) {
  if (z_image.shape() != z_text.shape()) {
    throw DimensionError("contrastive_loss: batch shapes differ, " + shape_string(z_image.shape()) + " vs " +
                         shape_string(z_text.shape()));
  }
  const Index n = z_image.value().rows();
  const Var<Scalar> logits = mul_scalar(cosine_similarity_matrix(z_image, z_text), exp(scale(log_tau, Scalar(-1))));
  const Var<Scalar> image_to_text = sum(diagonal(log_softmax_last(logits)));
  const Var<Scalar> text_to_image = sum(diagonal(log_softmax_last(transpose(logits))));
  return scale(add(image_to_text, text_to_image), Scalar(-1) / static_cast<Scalar>(n));
}

/// Loss value for fixed embeddings and an explicit temperature.
template <typename Scalar>
Scalar contrastive_loss(const Tensor<Scalar>& z_image, const Tensor<Scalar>& z_text, Scalar tau) {
  if (!(tau > Scalar(0))) throw DomainError("contrastive_loss: temperature must be positive, got " + std::to_string(tau));
  Tape<Scalar> tape;
  const Var<Scalar> log_tau = tape.constant(Tensor<Scalar>::scalar(std::log(tau)));
  return contrastive_loss(tape.constant(z_image), tape.constant(z_text), log_tau).value().item();
}

}  // namespace mmshare
