// Copyright 2026 The cbmlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "cbmlab/dense_array.hpp"

namespace cbmlab {
namespace {

TEST(DenseArrayTest, StoresRowMajor) {
  DenseArray a = DenseArray::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(a.rows(), 2u);
  EXPECT_EQ(a.cols(), 3u);
  EXPECT_EQ(a(1, 0), 4.0);
  EXPECT_EQ(a[5], 6.0);
  EXPECT_EQ(a.row(1)[2], 6.0);
}

TEST(DenseArrayTest, RejectsLengthMismatch) {
  EXPECT_THROW(DenseArray(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(DenseArrayTest, RejectsZeroExtent) {
  EXPECT_THROW(DenseArray(Shape{0, 3}), ShapeError);
}

TEST(DenseArrayTest, RejectsNonFiniteValues) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(DenseArray(Shape{1, 2}, std::vector<double>{0.0, nan}), NumericError);
  EXPECT_THROW(DenseArray(Shape{1, 1}, std::vector<double>{-inf}), NumericError);
}

TEST(DenseArrayTest, ScalarIsOneByOne) {
  DenseArray s = DenseArray::scalar(2.5);
  EXPECT_EQ(s.shape(), (Shape{1, 1}));
  EXPECT_EQ(s[0], 2.5);
}

TEST(DenseArrayTest, RankOneActsAsRow) {
  DenseArray v(Shape{4}, 1.0);
  EXPECT_EQ(v.rows(), 1u);
  EXPECT_EQ(v.cols(), 4u);
}

TEST(DenseArrayTest, TakeAndGatherRows) {
  DenseArray a = DenseArray::from_rows({{1, 2}, {3, 4}, {5, 6}});
  EXPECT_EQ(take_rows(a, 1, 3), DenseArray::from_rows({{3, 4}, {5, 6}}));
  const std::vector<std::size_t> idx = {2, 0, 2};
  EXPECT_EQ(gather_rows(a, idx), DenseArray::from_rows({{5, 6}, {1, 2}, {5, 6}}));
}

TEST(DenseArrayTest, ShapeStringIsReadable) {
  EXPECT_EQ(shape_string(Shape{3, 4}), "[3x4]");
}

}  // namespace
}  // namespace cbmlab
