#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hydramix/errors.hpp"
#include "hydramix/losses.hpp"
#include "testutil.hpp"

using namespace hydramix;
using testutil::fd_rel_err;
using testutil::random_dist;

namespace {

Tensor row(std::vector<float> v) {
  int64_t n = int64_t(v.size());
  return Tensor::from_data({1, n}, std::move(v));
}

Tensor rows2(std::vector<float> v) {
  int64_t c = int64_t(v.size()) / 2;
  return Tensor::from_data({2, c}, std::move(v));
}

Tensor vec(std::vector<float> v) {
  int64_t n = int64_t(v.size());
  return Tensor::from_data({n}, std::move(v));
}

}  // namespace

TEST_CASE("cross entropy scalar oracles") {
  CHECK(cross_entropy(row({1, 0, 0}), row({1, 0, 0})).values()[0] ==
        doctest::Approx(0.0).epsilon(1e-6));
  // -ln 0.7
  CHECK(cross_entropy(row({1, 0, 0}), row({0.7f, 0.2f, 0.1f})).values()[0] ==
        doctest::Approx(0.35667494393873245).epsilon(1e-6));
  // entropy of the uniform distribution, ln 3
  float third = 1.0f / 3.0f;
  CHECK(cross_entropy(row({third, third, third}), row({third, third, third})).values()[0] ==
        doctest::Approx(1.0986122886681098).epsilon(1e-6));

  // batch reduction is the mean of per-sample values
  Tensor t = rows2({1, 0, 0, 1, 0, 0});
  Tensor p = rows2({0.7f, 0.2f, 0.1f, 1, 0, 0});
  CHECK(cross_entropy(t, p).values()[0] == doctest::Approx(0.35667494393873245 / 2).epsilon(1e-6));

  CHECK_THROWS_AS(cross_entropy(row({1, 0}), row({0.5f, 0.3f, 0.2f})), ArgumentError);
  CHECK_THROWS_AS(cross_entropy(Tensor::from_data({0, 3}, {}), Tensor::from_data({0, 3}, {})),
                  ArgumentError);
}

TEST_CASE("reverse cross entropy scalar oracles") {
  CHECK(reverse_cross_entropy(row({1, 0, 0}), row({1, 0, 0}), -4.0f).values()[0] ==
        doctest::Approx(0.0).epsilon(1e-6));
  // -(0.7*0 + 0.2*(-4) + 0.1*(-4)) = 1.2
  CHECK(reverse_cross_entropy(row({1, 0, 0}), row({0.7f, 0.2f, 0.1f}), -4.0f).values()[0] ==
        doctest::Approx(1.2).epsilon(1e-6));
  // uniform target: constant log term -ln(1/3) regardless of the prediction
  float third = 1.0f / 3.0f;
  CHECK(reverse_cross_entropy(row({third, third, third}), row({0.9f, 0.05f, 0.05f}), -4.0f)
            .values()[0] == doctest::Approx(1.0986122886681098).epsilon(1e-5));

  CHECK_THROWS_AS(reverse_cross_entropy(row({1, 0, 0}), row({1, 0, 0}), 0.5f), ArgumentError);
}

TEST_CASE("reverse cross entropy of a one-hot target follows the clamp formula") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<float> p = random_dist(4, rng);
    int true_class = int(rng.uniform_int(4));
    std::vector<float> t(4, 0.0f);
    t[size_t(true_class)] = 1.0f;
    float clamp = -4.0f;
    double expect = -double(clamp) * (1.0 - double(p[size_t(true_class)]));
    CHECK(reverse_cross_entropy(row(t), row(p), clamp).values()[0] ==
          doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("sce composition") {
  Tensor t = row({1, 0, 0});
  Tensor p = row({0.7f, 0.2f, 0.1f});

  // zero-weight terms reduce exactly, not approximately
  float ce = cross_entropy(t, p).values()[0];
  float rce = reverse_cross_entropy(t, p, -4.0f).values()[0];
  CHECK(sce(t, p, {0.3f, 0.0f, -4.0f}).values()[0] == 0.3f * ce);
  CHECK(sce(t, p, {0.0f, 0.7f, -4.0f}).values()[0] == 0.7f * rce);

  // frozen sum of the two component oracles
  CHECK(sce(t, p, {1.0f, 1.0f, -4.0f}).values()[0] ==
        doctest::Approx(1.5566749439387324).epsilon(1e-6));

  CHECK_THROWS_AS(sce(t, p, {-1.0f, 1.0f, -4.0f}), ConfigError);
}

TEST_CASE("sce gradient against finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed + 5);
    Tensor logits = testutil::random_tensor({3, 4}, rng, -1.5f, 1.5f);
    logits.set_requires_grad(true);
    std::vector<float> tdata;
    for (int i = 0; i < 3; ++i) {
      auto d = random_dist(4, rng, 0.05f);
      tdata.insert(tdata.end(), d.begin(), d.end());
    }
    Tensor target = Tensor::from_data({3, 4}, std::move(tdata));
    SceConfig cfg{1.0f, 0.5f, -4.0f};
    double err = fd_rel_err({logits}, [&] { return sce(target, softmax(logits), cfg); });
    CHECK(err < 1e-3);
  }
}

TEST_CASE("mse") {
  CHECK(mse(vec({0.2f, 0.8f}), vec({0.2f, 0.8f})).values()[0] == 0.0f);
  CHECK(mse(vec({0.5f}), vec({0.25f})).values()[0] == doctest::Approx(0.0625).epsilon(1e-6));
  CHECK_THROWS_AS(mse(vec({0.5f}), vec({0.25f, 0.5f})), ArgumentError);

  for (uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 11);
    Tensor pred = testutil::random_tensor({6}, rng);
    Tensor target = testutil::random_tensor({6}, rng);
    pred.set_requires_grad(true);
    CHECK(fd_rel_err({pred}, [&] { return mse(pred, target); }) < 1e-3);
  }
}

TEST_CASE("gated mse weights samples and detaches the gate") {
  Tensor pred = vec({0.5f, 0.9f});
  Tensor target = vec({0.25f, 0.4f});

  // all-ones gates reduce to plain mse exactly
  CHECK(gated_mse(pred, target, {1.0f, 1.0f}).values()[0] == mse(pred, target).values()[0]);

  // a zero gate removes that sample's error: mean(0, 1*(0.5)^2) = 0.125
  CHECK(gated_mse(pred, target, {0.0f, 1.0f}).values()[0] == doctest::Approx(0.125).epsilon(1e-6));

  // gradient only flows through live samples
  pred.set_requires_grad(true);
  backward(gated_mse(pred, target, {0.0f, 1.0f}));
  CHECK(pred.grad()[0] == 0.0f);
  CHECK(pred.grad()[1] == doctest::Approx(0.5).epsilon(1e-5));

  CHECK_THROWS_AS(gated_mse(pred, target, {1.0f}), ArgumentError);

  for (uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 23);
    Tensor p = testutil::random_tensor({5}, rng);
    Tensor t = testutil::random_tensor({5}, rng);
    p.set_requires_grad(true);
    std::vector<float> gates;
    for (int i = 0; i < 5; ++i) gates.push_back(float(rng.uniform(0.1, 1.0)));
    CHECK(fd_rel_err({p}, [&] { return gated_mse(p, t, gates); }) < 1e-3);
  }
}

namespace {

struct JointStub {
  HeadBatch lab_t, lab_p, unl_t, unl_p;
};

JointStub make_stub() {
  JointStub s;
  s.lab_t = {rows2({1, 0, 0, 0, 1, 0}), vec({0.3f, 0.6f}), vec({0.2f, 0.8f})};
  s.lab_p = {rows2({0.7f, 0.2f, 0.1f, 0.25f, 0.6f, 0.15f}), vec({0.4f, 0.5f}),
             vec({0.25f, 0.7f})};
  s.unl_t = {rows2({0.6f, 0.3f, 0.1f, 0.2f, 0.5f, 0.3f}), vec({0.5f, 0.45f}),
             vec({0.35f, 0.65f})};
  s.unl_p = {rows2({0.5f, 0.3f, 0.2f, 0.3f, 0.4f, 0.3f}), vec({0.45f, 0.55f}),
             vec({0.3f, 0.6f})};
  return s;
}

// Independent double-precision recomputation of every joint-loss ingredient,
// written as plain loops over raw values.
struct ManualSide {
  double sce, mse;
};

ManualSide manual_side(const HeadBatch& t, const HeadBatch& p, double delta, double rho,
                       double clamp) {
  auto tc = t.class_probs.values();
  auto pc = p.class_probs.values();
  auto tx = t.cx.values();
  auto px = p.cx.values();
  auto ty = t.cy.values();
  auto py = p.cy.values();
  size_t n = tx.size(), c = tc.size() / n;
  double ce = 0.0, rce = 0.0, mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double gate = 1.0 - double(pc[i * c + c - 1]);
    for (size_t j = 0; j < c; ++j) {
      double tv = tc[i * c + j], pv = pc[i * c + j];
      ce -= tv * std::log(std::max(pv, 1e-7));
      rce -= pv * (tv == 0.0 ? clamp : std::log(tv));
    }
    mx += gate * (px[i] - tx[i]) * (px[i] - tx[i]);
    my += gate * (py[i] - ty[i]) * (py[i] - ty[i]);
  }
  return {(delta * ce + rho * rce) / double(n), (mx + my) / double(n)};
}

}  // namespace

TEST_CASE("joint loss matches an independent recomputation at mu 0.8") {
  JointStub s = make_stub();
  JointLossConfig cfg;  // mu 0.8, labelled 1.0/0.1, unlabelled 0.1/1.0
  JointLossParts parts = joint_loss(s.lab_t, s.lab_p, s.unl_t, s.unl_p, cfg);

  ManualSide lab = manual_side(s.lab_t, s.lab_p, 1.0, 0.1, -4.0);
  ManualSide unl = manual_side(s.unl_t, s.unl_p, 0.1, 1.0, -4.0);
  double expect = 0.8 * (lab.sce + unl.sce) + 0.2 * (lab.mse + unl.mse);

  CHECK(parts.sce_labelled.values()[0] == doctest::Approx(lab.sce).epsilon(1e-6));
  CHECK(parts.sce_unlabelled.values()[0] == doctest::Approx(unl.sce).epsilon(1e-6));
  CHECK(parts.mse_labelled.values()[0] == doctest::Approx(lab.mse).epsilon(1e-6));
  CHECK(parts.mse_unlabelled.values()[0] == doctest::Approx(unl.mse).epsilon(1e-6));
  CHECK(parts.total.values()[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("joint loss endpoints and the recombination identity") {
  JointStub s = make_stub();
  JointLossConfig cfg;

  cfg.mu = 1.0f;
  JointLossParts at_one = joint_loss(s.lab_t, s.lab_p, s.unl_t, s.unl_p, cfg);
  CHECK(at_one.total.values()[0] ==
        doctest::Approx(double(at_one.sce_labelled.values()[0]) +
                        double(at_one.sce_unlabelled.values()[0]))
            .epsilon(1e-6));

  cfg.mu = 0.0f;
  JointLossParts at_zero = joint_loss(s.lab_t, s.lab_p, s.unl_t, s.unl_p, cfg);
  CHECK(at_zero.total.values()[0] ==
        doctest::Approx(double(at_zero.mse_labelled.values()[0]) +
                        double(at_zero.mse_unlabelled.values()[0]))
            .epsilon(1e-6));

  // mu in the interior: the total is exactly the weighted recombination of the
  // reported components, and each component is non-negative, which together
  // make the total monotone in every component
  cfg.mu = 0.8f;
  JointLossParts p = joint_loss(s.lab_t, s.lab_p, s.unl_t, s.unl_p, cfg);
  for (const Tensor* part :
       {&p.sce_labelled, &p.sce_unlabelled, &p.mse_labelled, &p.mse_unlabelled}) {
    CHECK(part->values()[0] >= 0.0f);
  }
  double recombined = 0.8 * (double(p.sce_labelled.values()[0]) +
                             double(p.sce_unlabelled.values()[0])) +
                      0.2 * (double(p.mse_labelled.values()[0]) +
                             double(p.mse_unlabelled.values()[0]));
  CHECK(p.total.values()[0] == doctest::Approx(recombined).epsilon(1e-6));

  cfg.mu = 1.5f;
  CHECK_THROWS_AS(joint_loss(s.lab_t, s.lab_p, s.unl_t, s.unl_p, cfg), ConfigError);
}

TEST_CASE("joint loss with an empty unlabelled side") {
  JointStub s = make_stub();
  JointLossConfig cfg;
  HeadBatch empty;
  JointLossParts parts = joint_loss(s.lab_t, s.lab_p, empty, empty, cfg);
  CHECK(parts.sce_unlabelled.values()[0] == 0.0f);
  CHECK(parts.mse_unlabelled.values()[0] == 0.0f);
  ManualSide lab = manual_side(s.lab_t, s.lab_p, 1.0, 0.1, -4.0);
  CHECK(parts.total.values()[0] ==
        doctest::Approx(0.8 * lab.sce + 0.2 * lab.mse).epsilon(1e-6));
}

TEST_CASE("joint loss gradients flow through predictions but not the gate") {
  Rng rng(31);
  Tensor lab_logits = testutil::random_tensor({2, 3}, rng, -1.0f, 1.0f);
  Tensor unl_logits = testutil::random_tensor({2, 3}, rng, -1.0f, 1.0f);
  Tensor lab_cx = testutil::random_tensor({2}, rng);
  Tensor lab_cy = testutil::random_tensor({2}, rng);
  Tensor unl_cx = testutil::random_tensor({2}, rng);
  Tensor unl_cy = testutil::random_tensor({2}, rng);
  JointStub s = make_stub();
  JointLossConfig cfg;

  auto build = [&] {
    HeadBatch lab_p{softmax(lab_logits), sigmoid(lab_cx), sigmoid(lab_cy)};
    HeadBatch unl_p{softmax(unl_logits), sigmoid(unl_cx), sigmoid(unl_cy)};
    return joint_loss(s.lab_t, lab_p, s.unl_t, unl_p, cfg).total;
  };

  // regression-path gradients, checked at mu=0 so the SCE terms (constant in
  // these leaves) do not drown the difference quotient in rounding noise; the
  // recomputation oracle above already pins the interior-mu weighting
  cfg.mu = 0.0f;
  for (Tensor* leaf : {&lab_cx, &lab_cy, &unl_cx, &unl_cy}) leaf->set_requires_grad(true);
  CHECK(fd_rel_err({lab_cx, lab_cy, unl_cx, unl_cy}, build) < 1e-3);
  for (Tensor* leaf : {&lab_cx, &lab_cy, &unl_cx, &unl_cy}) leaf->set_requires_grad(false);

  // classification logits at mu=1: the gate never enters, so fd must agree
  cfg.mu = 1.0f;
  lab_logits.set_requires_grad(true);
  unl_logits.set_requires_grad(true);
  CHECK(fd_rel_err({lab_logits, unl_logits}, build) < 1e-3);

  // at mu=0 the only path from the logits into the loss is the detached gate,
  // so the analytic gradient must vanish identically
  cfg.mu = 0.0f;
  lab_logits.zero_grad();
  unl_logits.zero_grad();
  backward(build());
  for (float g : lab_logits.grad()) CHECK(g == 0.0f);
  for (float g : unl_logits.grad()) CHECK(g == 0.0f);
}

TEST_CASE("losses stay non-negative on random distributions") {
  Rng rng(41);
  for (int rep = 0; rep < 30; ++rep) {
    Tensor t = row(random_dist(5, rng));
    Tensor p = row(random_dist(5, rng));
    CHECK(cross_entropy(t, p).values()[0] >= 0.0f);
    CHECK(reverse_cross_entropy(t, p, -4.0f).values()[0] >= 0.0f);
    CHECK(sce(t, p, {1.0f, 0.1f, -4.0f}).values()[0] >= 0.0f);
  }
}
