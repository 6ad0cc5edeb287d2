#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "klite/rng.hpp"
#include "klite/tensor.hpp"

using namespace klite;
using tc::Mat;
using tc::Tape;
using Id = Tape<double>::Id;

namespace {

Mat<double> random_mat(rng::Rng& r, std::size_t rows, std::size_t cols,
                       double lo = -1.0, double hi = 1.0) {
  Mat<double> m(rows, cols);
  for (double& v : m.a) v = r.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("linear: identity weights reproduce the input") {
  Tape<double> t;
  const auto x = t.input(Mat<double>(2, 3, {1, 2, 3, 4, 5, 6}));
  const auto w = t.input(Mat<double>(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  const auto b = t.input(Mat<double>(1, 3));
  const auto y = t.linear(x, w, b);
  CHECK(t.val(y).a == std::vector<double>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("linear: zero input broadcasts the bias") {
  Tape<double> t;
  const auto x = t.input(Mat<double>(3, 2));
  const auto w = t.input(Mat<double>(2, 4));
  const auto b = t.input(Mat<double>(1, 4, {1, 2, 3, 4}));
  const auto y = t.linear(x, w, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(t.val(y).at(i, j) == static_cast<double>(j + 1));
}

TEST_CASE("linear: forward matches naive matmul, gradients pass checks") {
  rng::Rng r(11);
  Mat<double> x = random_mat(r, 4, 8);
  Mat<double> w = random_mat(r, 8, 3);
  Mat<double> b = random_mat(r, 1, 3);
  {
    Tape<double> t;
    const auto y =
        t.linear(t.param(&x, nullptr), t.param(&w, nullptr), t.param(&b, nullptr));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double want = b.at(0, j);
        for (std::size_t p = 0; p < 8; ++p) want += x.at(i, p) * w.at(p, j);
        CHECK(t.val(y).at(i, j) == doctest::Approx(want).epsilon(1e-12));
      }
  }
  const Mat<double> loss_w = random_mat(r, 4, 3);
  std::vector<Mat<double>*> params = {&x, &w, &b};
  const double err = tc::grad_check(
      params,
      [&](Tape<double>& t, const std::vector<Id>& ids) {
        return t.weighted_sum(t.linear(ids[0], ids[1], ids[2]), loss_w);
      },
      1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("linear: shape mismatch names both shapes") {
  Tape<double> t;
  const auto x = t.input(Mat<double>(2, 3));
  const auto w = t.input(Mat<double>(4, 2));
  const auto b = t.input(Mat<double>(1, 2));
  CHECK_THROWS_WITH_AS(t.linear(x, w, b),
                       doctest::Contains("[2x3]"), TensorError);
}

TEST_CASE("softmax: equal values give the uniform row") {
  Tape<double> t;
  const auto y = t.softmax_rows(t.input(Mat<double>(1, 4, {3, 3, 3, 3})));
  for (double v : t.val(y).a) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax: huge margins neither overflow nor produce NaN") {
  Tape<double> t;
  const auto y = t.softmax_rows(t.input(Mat<double>(1, 2, {1000, 0})));
  CHECK(t.val(y).a[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.val(y).a[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax: jacobian-vector products match finite differences") {
  rng::Rng r(13);
  Mat<double> x = random_mat(r, 5, 7);
  const Mat<double> loss_w = random_mat(r, 5, 7);
  std::vector<Mat<double>*> params = {&x};
  const double err = tc::grad_check(
      params,
      [&](Tape<double>& t, const std::vector<Id>& ids) {
        return t.weighted_sum(t.softmax_rows(ids[0]), loss_w);
      },
      1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("softmax rows always sum to one") {
  rng::Rng r(17);
  for (int iter = 0; iter < 50; ++iter) {
    Tape<double> t;
    const std::size_t n = 1 + r.below(6), m = 1 + r.below(9);
    // adversarial magnitudes up to 1e3
    const auto y = t.softmax_rows(t.input(random_mat(r, n, m, -1e3, 1e3)));
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += t.val(y).at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("layer_norm: constant rows normalize to the bias") {
  Tape<double> t;
  const auto x = t.input(Mat<double>(1, 4, {5, 5, 5, 5}));
  const auto gain = t.input(Mat<double>(1, 4, {1, 1, 1, 1}));
  const auto bias = t.input(Mat<double>(1, 4));
  const auto y = t.layer_norm(x, gain, bias);
  for (double v : t.val(y).a) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("layer_norm: output rows have zero mean and unit variance") {
  rng::Rng r(19);
  Tape<double> t;
  const std::size_t d = 64;
  const auto x = t.input(random_mat(r, 3, d, -4, 4));
  Mat<double> ones(1, d);
  for (double& v : ones.a) v = 1;
  const auto y = t.layer_norm(x, t.input(std::move(ones)), t.input(Mat<double>(1, d)));
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < d; ++j) mean += t.val(y).at(i, j);
    mean /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double c = t.val(y).at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // off by eps in denom
  }
}

TEST_CASE("layer_norm: gradients match finite differences") {
  rng::Rng r(23);
  Mat<double> x = random_mat(r, 3, 6);
  Mat<double> gain = random_mat(r, 1, 6, 0.5, 1.5);
  Mat<double> bias = random_mat(r, 1, 6);
  const Mat<double> loss_w = random_mat(r, 3, 6);
  std::vector<Mat<double>*> params = {&x, &gain, &bias};
  const double err = tc::grad_check(
      params,
      [&](Tape<double>& t, const std::vector<Id>& ids) {
        return t.weighted_sum(t.layer_norm(ids[0], ids[1], ids[2]), loss_w);
      },
      1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("cross_entropy: uniform logits cost ln(C)") {
  Tape<double> t;
  const auto logits = t.input(Mat<double>(2, 26));
  const auto loss = t.cross_entropy(logits, {3, 17});
  CHECK(t.val(loss).a[0] == doctest::Approx(std::log(26.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy: a huge margin at the target drives loss to zero") {
  Tape<double> t;
  Mat<double> m(1, 4);
  m.a = {0, 0, 50, 0};
  const auto loss = t.cross_entropy(t.input(std::move(m)), {2});
  CHECK(t.val(loss).a[0] < 1e-9);
}

TEST_CASE("cross_entropy: analytic gradient matches finite differences") {
  rng::Rng r(29);
  Mat<double> logits = random_mat(r, 6, 26, -2, 2);
  std::vector<int> targets;
  for (int i = 0; i < 6; ++i) targets.push_back(static_cast<int>(r.below(26)));
  std::vector<Mat<double>*> params = {&logits};
  const double err = tc::grad_check(
      params,
      [&](Tape<double>& t, const std::vector<Id>& ids) {
        return t.cross_entropy(ids[0], targets);
      },
      1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("cross_entropy: out-of-range target is rejected") {
  Tape<double> t;
  const auto logits = t.input(Mat<double>(1, 4));
  CHECK_THROWS_AS(t.cross_entropy(logits, {4}), TensorError);
  Tape<double> t2;
  const auto logits2 = t2.input(Mat<double>(1, 4));
  CHECK_THROWS_AS(t2.cross_entropy(logits2, {-1}), TensorError);
}

TEST_CASE("attention: a single key forces weight 1 and ignores the query") {
  rng::Rng r(31);
  const tc::AttentionConfig cfg(8, 2);
  Mat<double> wq = random_mat(r, 8, 8), wk = random_mat(r, 8, 8),
              wv = random_mat(r, 8, 8), wo = random_mat(r, 8, 8);
  Mat<double> bq = random_mat(r, 1, 8), bk = random_mat(r, 1, 8),
              bv = random_mat(r, 1, 8), bo = random_mat(r, 1, 8);
  const Mat<double> kv = random_mat(r, 1, 8);

  auto run = [&](const Mat<double>& query) {
    Tape<double> t;
    tc::MhaParamIds p{t.param(&wq, nullptr), t.param(&bq, nullptr),
                      t.param(&wk, nullptr), t.param(&bk, nullptr),
                      t.param(&wv, nullptr), t.param(&bv, nullptr),
                      t.param(&wo, nullptr), t.param(&bo, nullptr)};
    Mat<double> attn;
    const auto out = tc::multi_head_attention(t, t.input(query), t.input(kv), p,
                                              cfg, &attn);
    CHECK(attn.rows == 1);
    CHECK(attn.cols == 1);
    CHECK(attn.a[0] == doctest::Approx(1.0).epsilon(1e-12));
    return t.val(out);
  };

  const auto out1 = run(random_mat(r, 1, 8));
  const auto out2 = run(random_mat(r, 1, 8));
  for (std::size_t i = 0; i < out1.size(); ++i)
    CHECK(out1.a[i] == doctest::Approx(out2.a[i]).epsilon(1e-12));
}

TEST_CASE("attention: identity projections pass a single row through") {
  const std::size_t d = 4;
  const tc::AttentionConfig cfg(d, 2);
  Mat<double> eye(d, d);
  for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1;
  Mat<double> zero(1, d);
  Tape<double> t;
  const auto wid = t.input(eye);
  const auto bid = t.input(zero);
  tc::MhaParamIds p{wid, bid, wid, bid, wid, bid, wid, bid};
  const Mat<double> row(1, d, {0.3, -0.7, 1.1, 0.2});
  const auto x = t.input(row);
  const auto out = tc::multi_head_attention(t, x, x, p, cfg);
  for (std::size_t i = 0; i < d; ++i)
    CHECK(t.val(out).a[i] == doctest::Approx(row.a[i]).epsilon(1e-12));
}

namespace {

// single-loop reference attention, written independently of the tape ops
Mat<double> reference_mha(const Mat<double>& q_in, const Mat<double>& kv_in,
                          const Mat<double>& wq, const Mat<double>& bq,
                          const Mat<double>& wk, const Mat<double>& bk,
                          const Mat<double>& wv, const Mat<double>& bv,
                          const Mat<double>& wo, const Mat<double>& bo,
                          std::size_t heads) {
  const std::size_t d = wq.rows, nq = q_in.rows, nk = kv_in.rows;
  const std::size_t hd = d / heads;
  auto project = [&](const Mat<double>& x, const Mat<double>& w,
                     const Mat<double>& b) {
    Mat<double> y(x.rows, d);
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = b.a[j];
        for (std::size_t p = 0; p < d; ++p) acc += x.at(i, p) * w.at(p, j);
        y.at(i, j) = acc;
      }
    return y;
  };
  const Mat<double> q = project(q_in, wq, bq);
  const Mat<double> k = project(kv_in, wk, bk);
  const Mat<double> v = project(kv_in, wv, bv);
  Mat<double> cat(nq, d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> scores(nk);
      double mx = -1e300;
      for (std::size_t j = 0; j < nk; ++j) {
        double acc = 0;
        for (std::size_t e = 0; e < hd; ++e)
          acc += q.at(i, h * hd + e) * k.at(j, h * hd + e);
        scores[j] = acc / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, scores[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      for (std::size_t e = 0; e < hd; ++e) {
        double acc = 0;
        for (std::size_t j = 0; j < nk; ++j)
          acc += scores[j] / z * v.at(j, h * hd + e);
        cat.at(i, h * hd + e) = acc;
      }
    }
  }
  Mat<double> out(nq, d);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = bo.a[j];
      for (std::size_t p = 0; p < d; ++p) acc += cat.at(i, p) * wo.at(p, j);
      out.at(i, j) = acc;
    }
  return out;
}

}  // namespace

TEST_CASE("attention: forward matches the reference, grads pass checks") {
  rng::Rng r(37);
  const std::size_t d = 16, heads = 8;
  const tc::AttentionConfig cfg(d, heads);
  Mat<double> q_in = random_mat(r, 3, d), kv_in = random_mat(r, 4, d);
  Mat<double> wq = random_mat(r, d, d), wk = random_mat(r, d, d),
              wv = random_mat(r, d, d), wo = random_mat(r, d, d);
  Mat<double> bq = random_mat(r, 1, d), bk = random_mat(r, 1, d),
              bv = random_mat(r, 1, d), bo = random_mat(r, 1, d);

  const Mat<double> want = reference_mha(q_in, kv_in, wq, bq, wk, bk, wv, bv, wo,
                                         bo, heads);
  {
    Tape<double> t;
    tc::MhaParamIds p{t.param(&wq, nullptr), t.param(&bq, nullptr),
                      t.param(&wk, nullptr), t.param(&bk, nullptr),
                      t.param(&wv, nullptr), t.param(&bv, nullptr),
                      t.param(&wo, nullptr), t.param(&bo, nullptr)};
    Mat<double> attn;
    const auto out = tc::multi_head_attention(t, t.input(q_in), t.input(kv_in),
                                              p, cfg, &attn);
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(t.val(out).a[i] == doctest::Approx(want.a[i]).epsilon(1e-10));
    // head-averaged attention rows sum to 1
    for (std::size_t i = 0; i < attn.rows; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < attn.cols; ++j) s += attn.at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  const Mat<double> loss_w = random_mat(r, 3, d);
  std::vector<Mat<double>*> params = {&q_in, &kv_in, &wq, &bq, &wk,
                                      &bk,   &wv,    &bv, &wo, &bo};
  const double err = tc::grad_check(
      params,
      [&](Tape<double>& t, const std::vector<Id>& ids) {
        tc::MhaParamIds p{ids[2], ids[3], ids[4], ids[5],
                          ids[6], ids[7], ids[8], ids[9]};
        return t.weighted_sum(
            tc::multi_head_attention(t, ids[0], ids[1], p, cfg), loss_w);
      },
      1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("attention: non-divisible head count is rejected") {
  CHECK_THROWS_AS(tc::AttentionConfig(10, 4), TensorError);
}

TEST_CASE("grad_check flags a deliberately wrong backward") {
  // sign-flipped gradient: loss uses scale(-1) analytically but the numeric
  // probe sees scale(+1), so every component disagrees
  rng::Rng r(41);
  Mat<double> x = random_mat(r, 2, 3);
  const Mat<double> loss_w = random_mat(r, 2, 3);
  bool analytic_pass = true;
  std::vector<Mat<double>*> params = {&x};
  const double err = tc::grad_check(
      params,
      [&, flip = &analytic_pass](Tape<double>& t, const std::vector<Id>& ids) {
        const double sign = *flip ? -1.0 : 1.0;
        *flip = false;  // first call builds the analytic graph with -1
        return t.weighted_sum(t.scale(ids[0], sign), loss_w);
      },
      1e-4);
  CHECK(err > 0.1);
}

TEST_CASE("ops refuse NaN inputs") {
  Tape<double> t;
  Mat<double> bad(1, 2);
  bad.a[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(t.input(std::move(bad)), NumericalError);
}

TEST_CASE("adversarial magnitudes stay finite through every op") {
  rng::Rng r(43);
  for (int iter = 0; iter < 25; ++iter) {
    Tape<double> t;
    const std::size_t n = 1 + r.below(4), d = 2 * (1 + r.below(4));
    const auto x = t.input(random_mat(r, n, d, -1e3, 1e3));
    const auto w = t.input(random_mat(r, d, d, -1e3, 1e3));
    const auto b = t.input(random_mat(r, 1, d, -1e3, 1e3));
    Mat<double> ones(1, d);
    for (double& v : ones.a) v = 1;
    const auto y = t.linear(x, w, b);
    const auto s = t.softmax_rows(y);
    const auto ln = t.layer_norm(y, t.input(std::move(ones)),
                                 t.input(Mat<double>(1, d)));
    const auto rl = t.relu(ln);
    std::vector<int> targets(n, 0);
    const auto ce = t.cross_entropy(y, targets);
    CHECK(tc::all_finite(t.val(s)));
    CHECK(tc::all_finite(t.val(rl)));
    CHECK(tc::all_finite(t.val(ce)));
  }
}

TEST_CASE("fixed seed gives bit-identical forward and backward") {
  auto run = [] {
    rng::Rng r(97);
    Mat<double> x = random_mat(r, 3, 8);
    Mat<double> w = random_mat(r, 8, 8);
    Mat<double> b = random_mat(r, 1, 8);
    Mat<double> gw(8, 8);
    Tape<double> t;
    const auto y = t.linear(t.input(x), t.param(&w, &gw), t.input(b));
    const auto loss = t.cross_entropy(t.softmax_rows(y), {0, 1, 2});
    t.backward(loss);
    auto out = t.val(loss).a;
    out.insert(out.end(), gw.a.begin(), gw.a.end());
    return out;
  };
  CHECK(run() == run());
}
