#include <doctest.h>

#include "mmshare/tensor.hpp"

using namespace mmshare;

TEST_CASE("construction and shape") {
  TensorF t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.size() == 24);
  CHECK(t.cols() == 4);
  CHECK(t.rows() == 6);
  CHECK(t.dim(1) == 3);
  for (Index i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0f);
  CHECK(shape_string(t.shape()) == "[2x3x4]");
}

TEST_CASE("invalid shapes are rejected") {
  CHECK_THROWS_AS(TensorF(Shape{}), DimensionError);
  CHECK_THROWS_AS(TensorF(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(TensorF(Shape{2, 2}, std::vector<float>(3)), DimensionError);
}

TEST_CASE("row-major matrix view") {
  TensorD t = TensorD::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(t(1, 0) == 4);
  CHECK(t.matrix()(0, 2) == 3);
  t.matrix()(1, 1) = 50;
  CHECK(t[4] == 50);
  CHECK(t.matrix().rows() == 2);
}

TEST_CASE("cast and equality") {
  TensorD t = TensorD::from_rows({{0.5, -1.25}});
  TensorF f = t.cast<float>();
  CHECK(f.shape() == t.shape());
  CHECK(f[1] == -1.25f);
  CHECK(f.cast<double>() == t);
  CHECK_FALSE(TensorD::zeros({2}) == TensorD::zeros({1, 2}));
}

TEST_CASE("item and finiteness") {
  CHECK(TensorD::scalar(3.0).item() == 3.0);
  CHECK_THROWS(TensorD::zeros({2}).item());
  TensorF t = TensorF::ones({3});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("reshape keeps data") {
  TensorD t = TensorD::from_rows({{1, 2, 3}, {4, 5, 6}});
  TensorD r = t.reshaped({3, 2});
  CHECK(r(2, 1) == 6);
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}
