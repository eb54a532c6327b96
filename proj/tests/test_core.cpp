#include "doctest.h"

#include <algorithm>

#include "caesar/caesar_core.hpp"
#include "caesar/errors.hpp"
#include "caesar/gradcheck.hpp"
#include "support.hpp"

using namespace caesar;
using namespace caesar::core;
using geometry::RotationMatrix;
using testing::Gen;

namespace {

RowVector<double> rv(std::initializer_list<double> v) {
  RowVector<double> r(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

double max_abs(const RowVector<double>& a, const RowVector<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_SUITE("core") {

TEST_CASE("unflatten puts consecutive triplets in columns") {
  const auto s = rv({1, 2, 3, 4, 5, 6});
  const auto m = unflatten(s);
  REQUIRE(m.cols() == 2);
  CHECK(m(0, 0) == 1);
  CHECK(m(1, 0) == 2);
  CHECK(m(2, 0) == 3);
  CHECK(m(0, 1) == 4);
  CHECK(m(2, 1) == 6);
  Gen g(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = g.row(3 * g.integer(1, 40));
    CHECK(flatten<double>(unflatten(r)) == r);
  }
  CHECK_THROWS_AS(unflatten(g.row(7)), ArgumentError);
}

TEST_CASE("calibration examples") {
  Gen g(2);
  const auto s = g.row(96);
  CHECK(max_abs(calibrate(s, RotationMatrix()), s) == 0.0);
  const auto rotated = calibrate(rv({1, 0, 0, 0, 1, 0}), RotationMatrix::from_matrix(testing::rz(90)));
  CHECK(max_abs(rotated, rv({0, 1, 0, -1, 0, 0})) < 1e-12);
  CHECK_THROWS_AS(calibrate(g.row(8), RotationMatrix()), ArgumentError);
}

TEST_CASE("calibration preserves the norm") {
  Gen g(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = g.row(96, 3.0);
    CHECK(std::abs(calibrate(s, g.rotation()).norm() - s.norm()) < 1e-6);
  }
}

TEST_CASE("calibration composes and inverts") {
  Gen g(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = g.row(30);
    const auto t1 = g.rotation(), t2 = g.rotation();
    const auto both = RotationMatrix::from_matrix(t2.matrix() * t1.matrix());
    CHECK(max_abs(calibrate(calibrate(s, t1), t2), calibrate(s, both)) < 1e-6);
    CHECK(max_abs(calibrate(calibrate(s, t1), RotationMatrix::from_matrix(t1.matrix().transpose())), s) < 1e-6);
  }
}

TEST_CASE("self-calibration is the identity") {
  Gen g(5);
  for (int trial = 0; trial < 20; ++trial) {
    const geometry::Pose p{g.rotation(), g.vec3()};
    const auto s = g.row(12);
    const auto rel = geometry::compose_relative_rotation(p, p);
    CHECK(max_abs(calibrate(s, rel), s) < 1e-6);
  }
}

TEST_CASE("aggregation examples") {
  for (auto agg : {&aggregate_calibrated<double>, &aggregate_uncalibrated<double>}) {
    Gen g(6);
    const auto one = g.row(9);
    CHECK(agg({one}) == one);
    CHECK(agg({RowVector<double>::Zero(5), RowVector<double>::Constant(5, 2.0)}) == RowVector<double>::Ones(5));
    CHECK_THROWS_AS(agg({}), ArgumentError);
    CHECK_THROWS_AS(agg({g.row(3), g.row(4)}), ArgumentError);
  }
}

TEST_CASE("aggregation is exactly permutation invariant") {
  Gen g(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RowVector<double>> v;
    const int n = g.integer(2, 8);
    for (int i = 0; i < n; ++i) v.push_back(g.row(12, 100.0));
    auto shuffled = v;
    std::shuffle(shuffled.begin(), shuffled.end(), g.rng);
    CHECK(aggregate_calibrated(v) == aggregate_calibrated(shuffled));
    CHECK(aggregate_uncalibrated(v) == aggregate_uncalibrated(shuffled));
    CHECK(central_loss(v, aggregate_calibrated(v)) == central_loss(shuffled, aggregate_calibrated(shuffled)));
  }
}

TEST_CASE("CalibratedSemantic averages calibrated views") {
  Gen g(8);
  std::vector<RowVector<double>> originals{g.row(6), g.row(6), g.row(6)};
  std::vector<RotationMatrix> rotations{g.rotation(), g.rotation(), g.rotation()};
  const auto cs = CalibratedSemantic<double>::make(originals, rotations);
  RowVector<double> mean = RowVector<double>::Zero(6);
  for (int n = 0; n < 3; ++n) {
    CHECK(max_abs(cs.per_view[n], calibrate(originals[n], rotations[n])) < 1e-15);
    mean += cs.per_view[n] / 3.0;
  }
  CHECK(max_abs(cs.aggregate, mean) < 1e-6);
  rotations.pop_back();
  CHECK_THROWS_AS(CalibratedSemantic<double>::make(originals, rotations), ArgumentError);
}

TEST_CASE("global-local concatenation") {
  CHECK(concat_global_local(rv({1, 2}), rv({3, 4, 5})) == rv({1, 2, 3, 4, 5}));
  Gen g(9);
  const auto e = concat_global_local<double>(g.row(64), RowVector<double>::Zero(96));
  CHECK(e.size() == 160);
  CHECK(e.tail(96).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("central loss examples") {
  const auto a = rv({1, 1}), b = rv({3, 3});
  CHECK(central_loss({a, b}, rv({2, 2})) == 2.0);
  CHECK(central_loss({a}, a) == 0.0);
  CHECK(central_loss({a, a, a}, aggregate_calibrated<double>({a, a, a})) == 0.0);
  CHECK_THROWS_AS(central_loss<double>({}, a), ArgumentError);
}

TEST_CASE("central loss vanishes only when all views agree") {
  Gen g(10);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RowVector<double>> v;
    const auto base = g.row(9);
    const int n = g.integer(2, 6);
    for (int i = 0; i < n; ++i) v.push_back(base);
    CHECK(central_loss(v, aggregate_calibrated(v)) == 0.0);
    v[static_cast<std::size_t>(g.integer(0, n - 1))](g.integer(0, 8)) += g.uniform(0.01, 1.0);
    CHECK(central_loss(v, aggregate_calibrated(v)) > 0.0);
  }
}

TEST_CASE("tape forms agree with the plain operations") {
  Gen g(11);
  std::vector<RowVector<double>> rows{g.row(6), g.row(6), g.row(6)};
  std::vector<RotationMatrix> rot{g.rotation(), g.rotation(), g.rotation()};
  Matrix<double> stacked(3, 6);
  std::vector<Eigen::Matrix3d> mats;
  for (int n = 0; n < 3; ++n) {
    stacked.row(n) = rows[n];
    mats.push_back(rot[n].matrix());
  }
  ad::Tape<double> tape;
  const auto cal = calibrate(tape, tape.constant(stacked), mats);
  const auto agg = ad::mean_rows(tape, cal);
  const auto loss = central_loss(tape, cal, agg);
  const auto cs = CalibratedSemantic<double>::make(rows, rot);
  for (int n = 0; n < 3; ++n) CHECK(max_abs(tape.value(cal).row(n), cs.per_view[n]) < 1e-12);
  CHECK(std::abs(tape.value(loss)(0, 0) - central_loss(cs.per_view, cs.aggregate)) < 1e-12);
}

namespace {

struct RefineFixture {
  ad::ParameterStore<double> store;
  std::mt19937_64 rng{12};
  RefinementConfig config;
  std::unique_ptr<SemanticRefiner<double>> refiner;

  explicit RefineFixture(int stages = 3, int dim = 6) {
    config.semantic_dim = dim;
    config.heads = 2;
    refiner = std::make_unique<SemanticRefiner<double>>(config, stages, store, "refine", rng);
  }

  RefinementState<double> state(Gen& g, int n) const {
    RefinementState<double> s;
    s.current = g.row(config.semantic_dim);
    s.originals = g.matrix(n, config.semantic_dim);
    s.refiner = refiner.get();
    return s;
  }
};

}  // namespace

TEST_CASE("refine_step with a zero output projection is the identity") {
  RefineFixture f;
  f.refiner->block(0).output_weight().value.setZero();
  f.refiner->block(0).output_bias().value.setZero();
  Gen g(13);
  const auto s = f.state(g, 3);
  const auto next = refine_step(s);
  CHECK(next.current == s.current);
  CHECK(next.stage == 1);
}

TEST_CASE("refine_step over one view with identity projections adds that view") {
  RefineFixture f;
  auto& b = f.refiner->block(0);
  b.value_weight().value.setIdentity();
  b.value_bias().value.setZero();
  b.output_weight().value.setIdentity();
  b.output_bias().value.setZero();
  Gen g(14);
  const auto s = f.state(g, 1);
  const auto next = refine_step(s);
  CHECK(max_abs(next.current, s.current + s.originals.row(0)) < 1e-12);
}

TEST_CASE("refine_step keeps originals, is deterministic and stops at the last stage") {
  RefineFixture f(3);
  Gen g(15);
  const auto s = f.state(g, 4);
  const Matrix<double> originals = s.originals;
  const auto a = refine_step(s), b = refine_step(s);
  CHECK(a.originals == originals);
  CHECK(s.originals == originals);
  CHECK(a.current == b.current);
  const auto c = refine_step(a);
  CHECK(c.stage == 2);
  CHECK_THROWS_AS(refine_step(c), StateError);
  RefinementState<double> detached = s;
  detached.refiner = nullptr;
  CHECK_THROWS_AS(refine_step(detached), StateError);
}

TEST_CASE("refiner holds one block per stage transition") {
  RefineFixture f(4);
  CHECK(f.refiner->stages() == 4);
  CHECK(f.store.size() == 3 * 8);
  CHECK_NOTHROW(f.refiner->block(2));
  CHECK_THROWS(f.refiner->block(3));
  CHECK(f.refiner->block(0).query_weight().value != f.refiner->block(1).query_weight().value);
}

TEST_CASE("semantic stages follow the refinement switch") {
  RefineFixture f(3);
  Gen g(16);
  const Matrix<double> originals = g.matrix(3, 6);
  std::vector<Eigen::Matrix3d> rot{g.rotation().matrix(), g.rotation().matrix(), g.rotation().matrix()};
  {
    ad::Tape<double> tape;
    const auto st = build_semantic_stages(tape, tape.constant(originals), rot, SemanticOptions{true, false}, static_cast<const SemanticRefiner<double>*>(nullptr), 3);
    REQUIRE(st.per_stage.size() == 3);
    CHECK(tape.value(st.per_stage[1]) == tape.value(st.per_stage[0]));
    CHECK(tape.value(st.per_stage[2]) == tape.value(st.per_stage[0]));
  }
  {
    ad::Tape<double> tape;
    const auto st = build_semantic_stages(tape, tape.constant(originals), rot, {true, true}, f.refiner.get(), 3);
    CHECK(tape.value(st.per_stage[1]) != tape.value(st.per_stage[0]));
    // Stage 1 is one refine_step from the calibrated mean, against the
    // uncalibrated originals.
    RefinementState<double> s;
    s.current = tape.value(st.aggregate).row(0);
    s.originals = originals;
    s.refiner = f.refiner.get();
    CHECK(max_abs(tape.value(st.per_stage[1]).row(0), refine_step(s).current) < 1e-12);
  }
  {
    ad::Tape<double> tape;
    CHECK_THROWS_AS(build_semantic_stages(tape, tape.constant(originals), rot, SemanticOptions{true, true}, static_cast<const SemanticRefiner<double>*>(nullptr), 3), StateError);
  }
}

TEST_CASE("core gradient checks") {
  for (const auto* name : {"calibrate", "refine_step", "refine_step_per_view_sum"}) {
    for (const auto& r : gradcheck::run_suite(name)) {
      CAPTURE(r.name);
      CHECK(r.passed());
      CHECK(r.max_error() < 1e-4);
    }
  }
}

}  // TEST_SUITE
