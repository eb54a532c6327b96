#include "doctest.h"

#include <cmath>

#include "caesar/autodiff.hpp"
#include "caesar/gradcheck.hpp"
#include "support.hpp"

using namespace caesar;
using caesar::ad::Tape;
using caesar::ad::Var;
using testing::Gen;

namespace {

using In = std::vector<Var>;
using Mat = Matrix<double>;

void expect_gradients(const std::string& name, const gradcheck::Objective& f, std::vector<Mat> inputs) {
  const auto r = gradcheck::check(name, f, std::move(inputs), nullptr);
  CAPTURE(name);
  CHECK(r.finite);
  CHECK(r.max_error() < 1e-5);
}

Mat away_from_zero(Gen& g, Index rows, Index cols) {
  Mat m = g.matrix(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] += m.data()[i] < 0 ? -0.1 : 0.1;
  return m;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("forward values of basic ops") {
  Tape<double> t;
  Mat a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  const Var x = t.constant(a), y = t.constant(b);
  Mat ab(2, 2);
  ab << 19, 22, 43, 50;
  CHECK(t.value(ad::matmul(t, x, y)) == ab);
  CHECK(t.value(ad::sum_all(t, x))(0, 0) == 10);
  CHECK(t.value(ad::mean_all(t, x))(0, 0) == 2.5);
  CHECK(t.value(ad::mse(t, x, y))(0, 0) == 16);
  Mat means(1, 2);
  means << 2, 3;
  CHECK(t.value(ad::mean_rows(t, x)) == means);
  CHECK(t.value(ad::gather_rows(t, x, {1, 1, 0})).row(1) == a.row(1));
  CHECK(t.value(ad::repeat_row(t, ad::slice_rows(t, x, 1, 1), 3)).rows() == 3);
}

TEST_CASE("shape mismatches are argument errors") {
  Tape<double> t;
  const Var a = t.constant(Mat::Zero(2, 3)), b = t.constant(Mat::Zero(2, 2));
  CHECK_THROWS_AS(ad::matmul(t, a, b), ArgumentError);
  CHECK_THROWS_AS(ad::add(t, a, b), ArgumentError);
  CHECK_THROWS_AS(ad::slice_cols(t, a, 2, 2), ArgumentError);
  CHECK_THROWS_AS(ad::segment_mean(t, a, 3), ArgumentError);
  CHECK_THROWS_AS(t.value(Var{99}), ArgumentError);
}

TEST_CASE("gradients accumulate over shared uses") {
  Tape<double> t;
  Mat a(1, 3);
  a << 1, -2, 3;
  const Var x = t.input(a);
  t.backward(ad::sum_all(t, ad::mul(t, x, x)));
  CHECK(t.grad(x) == 2 * a);
}

TEST_CASE("parameters receive gradients and inference tapes record nothing") {
  ad::ParameterStore<double> store;
  auto& p = store.add("w", ad::ParamGroup::rest, Mat::Constant(2, 2, 0.5));
  store.zero_grad();
  {
    Tape<double> t;
    t.backward(ad::sum_all(t, ad::matmul(t, t.constant(Mat::Ones(1, 2)), t.param(p))));
  }
  CHECK(p.grad == Mat::Ones(2, 2));
  CHECK(store.find("w") == &p);
  CHECK(store.find("nope") == nullptr);
  CHECK(store.scalar_count() == 4);
  Tape<double> inference(false);
  const Var y = ad::sum_all(inference, inference.param(p));
  CHECK(inference.value(y)(0, 0) == 2.0);
  CHECK_FALSE(inference.requires_grad(y));
}

TEST_CASE("elementwise and linear op gradients") {
  Gen g(1);
  expect_gradients("matmul", [](Tape<double>& t, const In& in) { return ad::matmul(t, in[0], in[1]); },
                   {g.matrix(3, 4), g.matrix(4, 2)});
  expect_gradients("linear", [](Tape<double>& t, const In& in) { return ad::linear(t, in[0], in[1], in[2]); },
                   {g.matrix(3, 4), g.matrix(4, 2), g.matrix(1, 2)});
  expect_gradients("add/sub/mul", [](Tape<double>& t, const In& in) {
    return ad::mul(t, ad::add(t, in[0], in[1]), ad::sub(t, in[0], in[1]));
  }, {g.matrix(2, 3), g.matrix(2, 3)});
  expect_gradients("scale", [](Tape<double>& t, const In& in) { return ad::scale(t, in[0], -1.7); }, {g.matrix(2, 2)});
  expect_gradients("add_row", [](Tape<double>& t, const In& in) { return ad::add_row(t, in[0], in[1]); },
                   {g.matrix(3, 2), g.matrix(1, 2)});
  expect_gradients("gelu", [](Tape<double>& t, const In& in) { return ad::gelu(t, in[0]); }, {g.matrix(3, 3, 3.0)});
  expect_gradients("sigmoid", [](Tape<double>& t, const In& in) { return ad::sigmoid(t, in[0]); },
                   {g.matrix(3, 3, 3.0)});
  expect_gradients("abs", [](Tape<double>& t, const In& in) { return ad::abs(t, in[0]); }, {away_from_zero(g, 3, 3)});
  expect_gradients("layer_norm", [](Tape<double>& t, const In& in) {
    return ad::layer_norm(t, in[0], in[1], in[2]);
  }, {g.matrix(3, 5), g.matrix(1, 5), g.matrix(1, 5)});
  expect_gradients("mse", [](Tape<double>& t, const In& in) { return ad::mse(t, in[0], in[1]); },
                   {g.matrix(3, 3), g.matrix(3, 3)});
  expect_gradients("mean_all", [](Tape<double>& t, const In& in) { return ad::mean_all(t, in[0]); }, {g.matrix(2, 5)});
}

TEST_CASE("structural op gradients") {
  Gen g(2);
  expect_gradients("concat_cols", [](Tape<double>& t, const In& in) {
    const Var parts[] = {in[0], in[1]};
    return ad::concat_cols(t, std::span<const Var>(parts));
  }, {g.matrix(3, 2), g.matrix(3, 4)});
  expect_gradients("concat_rows", [](Tape<double>& t, const In& in) {
    const Var parts[] = {in[0], in[1]};
    return ad::concat_rows(t, std::span<const Var>(parts));
  }, {g.matrix(2, 3), g.matrix(1, 3)});
  expect_gradients("slices", [](Tape<double>& t, const In& in) {
    return ad::slice_rows(t, ad::slice_cols(t, in[0], 1, 2), 1, 2);
  }, {g.matrix(4, 4)});
  expect_gradients("gather_rows", [](Tape<double>& t, const In& in) {
    return ad::gather_rows(t, in[0], {2, 0, 2, 2});
  }, {g.matrix(3, 2)});
  expect_gradients("repeat_row", [](Tape<double>& t, const In& in) { return ad::repeat_row(t, in[0], 4); },
                   {g.matrix(1, 3)});
  expect_gradients("segment_mean", [](Tape<double>& t, const In& in) { return ad::segment_mean(t, in[0], 3); },
                   {g.matrix(6, 2)});
  expect_gradients("mean_rows", [](Tape<double>& t, const In& in) { return ad::mean_rows(t, in[0]); },
                   {g.matrix(4, 3)});
  ad::SparseRows<double> rows;
  rows.add(0, 0.25);
  rows.add(2, 0.75);
  rows.finish_row();
  rows.finish_row();  // empty row
  rows.add(1, -1.0);
  rows.add(1, 0.5);
  rows.finish_row();
  expect_gradients("sparse_combine", [rows](Tape<double>& t, const In& in) {
    return ad::sparse_combine(t, in[0], rows);
  }, {g.matrix(3, 4)});
  const Mat base = g.matrix(5, 2);
  expect_gradients("scatter_rows", [base](Tape<double>& t, const In& in) {
    return ad::scatter_rows(t, base, in[0], {3, 0});
  }, {g.matrix(2, 2)});
  std::vector<Eigen::Matrix3d> rot{g.rotation().matrix(), g.rotation().matrix()};
  expect_gradients("rotate_triplets", [rot](Tape<double>& t, const In& in) {
    return ad::rotate_triplets(t, in[0], rot);
  }, {g.matrix(2, 6)});
}

TEST_CASE("sparse combine and scatter values") {
  Tape<double> t;
  Mat a(3, 1);
  a << 1, 2, 4;
  ad::SparseRows<double> rows;
  rows.add(0, 0.5);
  rows.add(2, 0.25);
  rows.finish_row();
  CHECK(t.value(ad::sparse_combine(t, t.constant(a), rows))(0, 0) == 1.5);
  Mat r(1, 1);
  r << 9;
  const Mat out = t.value(ad::scatter_rows(t, a, t.constant(r), {1}));
  CHECK(out(0, 0) == 1);
  CHECK(out(1, 0) == 9);
  CHECK(out(2, 0) == 4);
}

TEST_CASE("block attention") {
  Gen g(3);
  SUBCASE("gradients with and without a mask") {
    expect_gradients("attention", [](Tape<double>& t, const In& in) {
      return ad::block_attention(t, in[0], in[1], in[2], 2, 2, 3);
    }, {g.matrix(4, 4), g.matrix(6, 4), g.matrix(6, 4)});
    expect_gradients("masked attention", [](Tape<double>& t, const In& in) {
      return ad::block_attention(t, in[0], in[1], in[2], 2, 1, 3, {1, 0, 1, 0, 0, 0});
    }, {g.matrix(2, 4), g.matrix(6, 4), g.matrix(6, 4)});
  }
  SUBCASE("a single key returns its value") {
    Tape<double> t;
    const Mat v = g.matrix(1, 4);
    const Var out = ad::block_attention(t, t.constant(g.matrix(1, 4)), t.constant(g.matrix(1, 4)), t.constant(v), 2, 1, 1);
    CHECK((t.value(out) - v).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("fully masked blocks give zero rows") {
    Tape<double> t;
    const Var out = ad::block_attention(t, t.constant(g.matrix(2, 2)), t.constant(g.matrix(4, 2)),
                                        t.constant(g.matrix(4, 2)), 1, 1, 2, {0, 0, 1, 1});
    CHECK(t.value(out).row(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(t.value(out).row(1).cwiseAbs().maxCoeff() > 0.0);
  }
  SUBCASE("key order inside a block does not matter") {
    const Mat q = g.matrix(1, 4), k = g.matrix(3, 4), v = g.matrix(3, 4);
    Mat kp = k, vp = v;
    kp.row(0).swap(kp.row(2));
    vp.row(0).swap(vp.row(2));
    Tape<double> t;
    const Var a = ad::block_attention(t, t.constant(q), t.constant(k), t.constant(v), 2, 1, 3);
    const Var b = ad::block_attention(t, t.constant(q), t.constant(kp), t.constant(vp), 2, 1, 3);
    CHECK((t.value(a) - t.value(b)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("conv3x3 gradients and reflect padding") {
  Gen g(4);
  for (Index stride : {1, 2}) {
    expect_gradients("conv3x3", [stride](Tape<double>& t, const In& in) {
      return ad::conv3x3(t, in[0], 5, 4, in[1], in[2], stride);
    }, {g.matrix(20, 2), g.matrix(18, 3), g.matrix(1, 3)});
  }
  CHECK(ad::conv_out_size(5, 2) == 3);
  CHECK(ad::conv_out_size(8, 2) == 4);
  // A centre-tap kernel is the identity; a constant image stays constant
  // under any kernel thanks to reflect padding.
  Tape<double> t;
  Mat w = Mat::Zero(9, 1);
  w(4, 0) = 1;
  const Mat x = g.matrix(12, 1);
  CHECK(t.value(ad::conv3x3(t, t.constant(x), 3, 4, t.constant(w), t.constant(Mat::Zero(1, 1)), 1)) == x);
  const Mat y = t.value(ad::conv3x3(t, t.constant(Mat::Constant(12, 1, 2.0)), 3, 4, t.constant(g.matrix(9, 1)),
                                    t.constant(Mat::Zero(1, 1)), 1));
  CHECK((y.array() - y(0, 0)).abs().maxCoeff() < 1e-14);
}

TEST_CASE("float and double tapes agree") {
  Gen g(5);
  const Mat a = g.matrix(4, 6), b = g.matrix(6, 3);
  Tape<double> td;
  Tape<float> tf;
  const Var d = ad::gelu(td, ad::matmul(td, td.constant(a), td.constant(b)));
  const Var f = ad::gelu(tf, ad::matmul(tf, tf.constant(a.cast<float>()), tf.constant(b.cast<float>())));
  CHECK((td.value(d) - tf.value(f).cast<double>()).cwiseAbs().maxCoeff() < 1e-5);
}

}  // TEST_SUITE
