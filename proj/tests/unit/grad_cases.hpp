// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "lmlite/autodiff.hpp"
#include "test_util.hpp"

namespace lmlite::testing {

using ad::Array;
using ad::Graph;
using ad::Shape;
using ad::Var;

// Weighted sum against a fixed random tensor so every output coordinate
// contributes a distinct, non-zero gradient.
inline Var probe(Graph& g, Var y, std::uint64_t seed) {
  return ad::sum(ad::multiply(y, g.constant(random_array(y.shape(), seed, 0.5, 1.5))));
}

struct OpCase {
  const char* name;
  Shape shape;
  ad::ScalarFn fn;
  double lo = -1.0;
  double hi = 1.0;
};

inline std::vector<OpCase> primitive_cases() {
  const Array B = random_array({3, 4}, 11);
  const Array v4 = random_array({4}, 12);
  return {
      {"matmul_left", {2, 3}, [B](Graph& g, Var x) { return probe(g, ad::matmul(x, g.constant(B)), 1); }},
      {"matmul_right", {3, 4}, [](Graph& g, Var x) {
         return probe(g, ad::matmul(g.constant(random_array({2, 3}, 13)), x), 2);
       }},
      {"matmul_batched", {2, 3, 4}, [](Graph& g, Var x) {
         return probe(g, ad::matmul(x, g.constant(random_array({2, 4, 2}, 14))), 3);
       }},
      {"add", {3, 4}, [B](Graph& g, Var x) { return probe(g, ad::add(x, g.constant(B)), 4); }},
      {"add_broadcast", {4}, [B](Graph& g, Var x) { return probe(g, ad::add(g.constant(B), x), 5); }},
      {"sub", {3, 4}, [B](Graph& g, Var x) { return probe(g, ad::sub(g.constant(B), x), 6); }},
      {"multiply", {3, 4}, [B](Graph& g, Var x) { return probe(g, ad::multiply(x, g.constant(B)), 7); }},
      {"multiply_broadcast", {4}, [B](Graph& g, Var x) { return probe(g, ad::multiply(g.constant(B), x), 8); }},
      {"multiply_self", {5}, [](Graph& g, Var x) { return probe(g, ad::multiply(x, x), 9); }},
      {"scale", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::scale(x, -2.5), 10); }},
      {"transpose", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::transpose(x), 11); }},
      {"permute", {2, 3, 4}, [](Graph& g, Var x) { return probe(g, ad::permute(x, {2, 0, 1}), 12); }},
      {"reshape", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::reshape(x, {2, 6}), 13); }},
      {"concat0", {2, 4}, [B](Graph& g, Var x) { return probe(g, ad::concat({x, g.constant(B), x}, 0), 14); }},
      {"concat1", {3, 2}, [B](Graph& g, Var x) { return probe(g, ad::concat({g.constant(B), x}, 1), 15); }},
      {"slice", {5, 4}, [](Graph& g, Var x) { return probe(g, ad::slice(x, 0, 1, 4), 16); }},
      {"slice_axis1", {3, 5}, [](Graph& g, Var x) { return probe(g, ad::slice(x, 1, 2, 5), 17); }},
      {"gather_rows", {4, 3}, [](Graph& g, Var x) { return probe(g, ad::gather_rows(x, {2, 0, 2, 3}), 18); }},
      {"sum", {3, 4}, [](Graph& g, Var x) { return ad::scale(ad::sum(x), 1.7); }},
      {"mean", {3, 4}, [](Graph& g, Var x) { return ad::scale(ad::mean(x), 1.7); }},
      {"sum_axis0", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::sum(x, 0), 19); }},
      {"mean_axis1", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::mean(x, 1), 20); }},
      {"softmax", {3, 5}, [](Graph& g, Var x) { return probe(g, ad::softmax(x), 21); }},
      {"log_softmax", {3, 5}, [](Graph& g, Var x) { return probe(g, ad::log_softmax(x), 22); }},
      {"log", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::log(x), 23); }, 0.5, 2.0},
      {"exp", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::exp(x), 24); }},
      {"gelu", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::gelu(x), 25); }, -3.0, 3.0},
      {"layer_norm_x", {3, 4}, [v4](Graph& g, Var x) {
         return probe(g, ad::layer_norm(x, g.constant(v4), g.constant(random_array({4}, 26))), 27);
       }},
      {"layer_norm_gamma", {4}, [B](Graph& g, Var x) {
         return probe(g, ad::layer_norm(g.constant(B), x, g.constant(random_array({4}, 28))), 29);
       }},
      {"layer_norm_beta", {4}, [B, v4](Graph& g, Var x) {
         return probe(g, ad::layer_norm(g.constant(B), g.constant(v4), x), 33);
       }},
      {"l2_normalize", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::l2_normalize(x), 30); }},
      {"pick", {3, 4}, [](Graph& g, Var x) { return probe(g, ad::pick(x, {1, 3, 0}), 31); }},
      {"smooth_l1", {3, 4}, [](Graph& g, Var x) {
         // offsets keep every residual away from the |r| = beta kink
         Array t(Shape{3, 4});
         for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = (i % 2 ? 2.0 : 0.1);
         return probe(g, ad::smooth_l1(x, g.constant(t), 0.5), 32);
       }, -0.05, 0.05},
  };
}

}  // namespace lmlite::testing
