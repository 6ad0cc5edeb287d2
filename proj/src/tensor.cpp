#include "klite/tensor.hpp"

#include <algorithm>

namespace klite::tc {

double grad_check(
    std::span<Mat<double>* const> params,
    const std::function<std::uint32_t(Tape<double>&,
                                      const std::vector<std::uint32_t>&)>& build,
    double eps) {
  // analytic pass
  std::vector<Mat<double>> grads;
  grads.reserve(params.size());
  for (const Mat<double>* p : params) grads.emplace_back(p->rows, p->cols);
  {
    Tape<double> t;
    std::vector<std::uint32_t> ids;
    ids.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      ids.push_back(t.param(params[i], &grads[i]));
    const auto loss = build(t, ids);
    if (t.val(loss).size() != 1) throw TensorError("grad_check: loss not scalar");
    t.backward(loss);
  }

  auto eval = [&]() {
    Tape<double> t;
    std::vector<std::uint32_t> ids;
    ids.reserve(params.size());
    for (Mat<double>* p : params) ids.push_back(t.param(p, nullptr));
    return t.val(build(t, ids)).a[0];
  };

  // central differences over every parameter scalar
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat<double>& p = *params[i];
    for (std::size_t e = 0; e < p.size(); ++e) {
      const double orig = p.a[e];
      p.a[e] = orig + eps;
      const double up = eval();
      p.a[e] = orig - eps;
      const double down = eval();
      p.a[e] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads[i].a[e];
      const double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-4);
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace klite::tc
