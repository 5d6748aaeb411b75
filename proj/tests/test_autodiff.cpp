#include <functional>

#include "doctest.h"
#include "seqret/autodiff.hpp"
#include "seqret/dual.hpp"
#include "test_util.hpp"

using namespace seqret;
using seqret::testing::central_difference;
using seqret::testing::max_relative_error;

namespace {

using Fn = std::function<ad::Value<double>(ad::Tape<double>&, ad::Value<double>)>;

// Evaluates f(x) where x is a single rows x cols leaf, returning value and gradient.
double eval(const Fn& f, const Eigen::VectorXd& flat, Eigen::Index rows, Eigen::Index cols,
            Eigen::VectorXd* grad = nullptr) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Eigen::Map<const Eigen::MatrixXd>(flat.data(), rows, cols));
  auto y = f(tape, x);
  if (grad != nullptr) {
    tape.backward(y);
    Eigen::MatrixXd g = tape.grad(x);
    *grad = Eigen::Map<Eigen::VectorXd>(g.data(), g.size());
  }
  return y.scalar();
}

double fd_check(const Fn& f, Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Eigen::VectorXd x(rows * cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = u(rng);
  Eigen::VectorXd g;
  eval(f, x, rows, cols, &g);
  const auto fd = central_difference([&](const Eigen::VectorXd& y) { return eval(f, y, rows, cols); }, x);
  return max_relative_error(g, fd);
}

}  // namespace

TEST_CASE("square derivative at 3") {
  ad::Tape<double> tape;
  auto x = tape.leaf(Eigen::MatrixXd::Constant(1, 1, 3.0));
  tape.backward(ad::mul(x, x));
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("exp at zero") {
  ad::Tape<double> tape;
  auto x = tape.leaf(Eigen::MatrixXd::Zero(1, 1));
  auto y = ad::exp(x);
  CHECK(y.scalar() == 1.0);
  tape.backward(y);
  CHECK(tape.grad(x)(0, 0) == 1.0);
}

TEST_CASE("product and tanh") {
  ad::Tape<double> tape;
  auto x = tape.leaf(Eigen::MatrixXd::Constant(1, 1, 2.0));
  auto y = tape.leaf(Eigen::MatrixXd::Constant(1, 1, 5.0));
  tape.backward(ad::mul(x, y));
  CHECK(tape.grad(x)(0, 0) == 5.0);
  CHECK(tape.grad(y)(0, 0) == 2.0);

  ad::Tape<double> t2;
  auto z = t2.leaf(Eigen::MatrixXd::Zero(1, 1));
  t2.backward(ad::tanh(z));
  CHECK(t2.grad(z)(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("logsumexp gradient matches finite differences") {
  Eigen::VectorXd x(2);
  x << 0.3, -1.2;
  Fn f = [](ad::Tape<double>&, ad::Value<double> v) { return ad::logsumexp(v); };
  Eigen::VectorXd g;
  eval(f, x, 2, 1, &g);
  const auto fd = central_difference([&](const Eigen::VectorXd& y) { return eval(f, y, 2, 1); }, x);
  CHECK(max_relative_error(g, fd) < 1e-6);
  // softmax of (0.3, -1.2) in closed form
  const double p0 = 1.0 / (1.0 + std::exp(-1.5));
  CHECK(g(0) == doctest::Approx(p0).epsilon(1e-12));
}

TEST_CASE("every primitive agrees with central differences") {
  const std::vector<std::pair<const char*, Fn>> cases = {
      {"add/sub", [](auto& t, auto x) {
         auto c = t.constant(Eigen::MatrixXd::Constant(3, 2, 0.7));
         return ad::sum(ad::square(ad::sub(ad::add(x, c), ad::neg(x))));
       }},
      {"div", [](auto& t, auto x) {
         auto c = t.constant(Eigen::MatrixXd::Constant(3, 2, 3.0));
         return ad::sum(ad::div(x, ad::add(ad::square(x), c)));
       }},
      {"exp/log", [](auto&, auto x) { return ad::sum(ad::log(ad::shift(ad::exp(x), 0.5))); }},
      {"tanh/relu/abs", [](auto&, auto x) {
         return ad::sum(ad::mul(ad::tanh(x), ad::add(ad::relu(x), ad::abs(x))));
       }},
      {"matmul/transpose", [](auto&, auto x) {
         return ad::sum(ad::tanh(ad::matmul(x, ad::transpose(x))));
       }},
      {"colvec ops", [](auto&, auto x) {
         auto v = ad::cols(x, 1, 1);
         return ad::sum(ad::square(ad::add_colvec(ad::mul_colvec(x, v), v)));
       }},
      {"softmax_rows causal", [](auto& t, auto x) {
         auto w = t.constant((Eigen::MatrixXd(3, 3) << 1, -2, 0.5, 0.3, 2, -1, 0.4, 0.1, 3).finished());
         auto s = ad::matmul(x, ad::transpose(x));
         return ad::sum(ad::mul(ad::softmax_rows(s, true), w));
       }},
      {"softmax", [](auto& t, auto x) {
         auto w = t.constant((Eigen::MatrixXd(3, 2) << 1, -2, 0.5, 0.3, 2, -1).finished());
         return ad::dot(ad::softmax(x), w);
       }},
      {"log_softmax/pick", [](auto&, auto x) { return ad::sum(ad::pick(ad::log_softmax_cols(x), {2, 0})); }},
      {"cumsum/diff/select/hcat/row", [](auto&, auto x) {
         auto y = ad::hcat(ad::cumsum_cols(x), ad::diff_cols(x));
         auto z = ad::select_cols(y, {0, 3, 3, 1});
         return ad::sum(ad::square(ad::add(ad::row(z, 1), ad::row(z, 2))));
       }},
      {"matvec/scale/logsumexp", [](auto& t, auto x) {
         auto v = t.constant((Eigen::MatrixXd(2, 1) << 0.5, -1.5).finished());
         return ad::logsumexp(ad::scale(ad::matvec(x, v), 1.7));
       }},
  };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    CAPTURE(cases[i].first);
    CHECK(fd_check(cases[i].second, 3, 2, 100 + i) < 1e-4);
  }
}

TEST_CASE("random three-layer composition") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Eigen::MatrixXd w1 = normal_matrix(4, 3, 1.0, rng);
    const Eigen::MatrixXd w2 = normal_matrix(4, 4, 1.0, rng);
    const Eigen::MatrixXd w3 = normal_matrix(1, 4, 1.0, rng);
    Fn f = [&](ad::Tape<double>& t, ad::Value<double> x) {
      auto h = ad::tanh(ad::matmul(t.constant(w1), x));
      h = ad::exp(ad::scale(ad::matmul(t.constant(w2), h), 0.3));
      return ad::sum(ad::matmul(t.constant(w3), h));
    };
    CHECK(fd_check(f, 3, 2, seed) < 1e-4);
  }
}

TEST_CASE("adjoints are linear") {
  Rng rng(3);
  const Eigen::MatrixXd x0 = normal_matrix(3, 2, 1.0, rng);
  auto f = [](ad::Value<double> x) { return ad::sum(ad::tanh(ad::matmul(x, ad::transpose(x)))); };
  auto g = [](ad::Value<double> x) { return ad::logsumexp(ad::square(x)); };
  const double alpha = 1.3, beta = -0.4;
  auto grad_of = [&](auto build) {
    ad::Tape<double> tape;
    auto x = tape.leaf(x0);
    tape.backward(build(x));
    return Eigen::MatrixXd(tape.grad(x));
  };
  const Eigen::MatrixXd combined =
      grad_of([&](auto x) { return ad::add(ad::scale(f(x), alpha), ad::scale(g(x), beta)); });
  const Eigen::MatrixXd separate = alpha * grad_of(f) + beta * grad_of(g);
  CHECK((combined - separate).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("unused leaves get zero gradient") {
  ad::Tape<double> tape;
  auto x = tape.leaf(Eigen::MatrixXd::Constant(2, 2, 1.5));
  auto unused = tape.leaf(Eigen::MatrixXd::Constant(3, 1, 2.0));
  tape.backward(ad::sum(ad::square(x)));
  CHECK(tape.grad(unused).isZero());
  CHECK(tape.grad(unused).rows() == 3);
}

TEST_CASE("errors") {
  ad::Tape<double> tape;
  auto x = tape.leaf(Eigen::MatrixXd::Constant(2, 1, -1.0));
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  CHECK_THROWS_AS(ad::log(x), std::domain_error);
  CHECK_THROWS_AS(ad::div(x, tape.constant(Eigen::MatrixXd::Zero(2, 1))), std::domain_error);
  CHECK_THROWS_AS(ad::add(x, tape.constant(Eigen::MatrixXd::Zero(3, 1))), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul(x, x), std::invalid_argument);
}

TEST_CASE("dual tape gives Hessian-vector products") {
  // f(x) = sum(tanh(A x)^2) with x in R^3; H u checked against differences of gradients.
  Rng rng(11);
  const Eigen::MatrixXd a = normal_matrix(4, 3, 1.0, rng);
  const Eigen::VectorXd x0 = normal_matrix(3, 1, 1.0, rng);
  const Eigen::VectorXd u = normal_matrix(3, 1, 1.0, rng);

  auto grad_at = [&](const Eigen::VectorXd& x) {
    ad::Tape<double> tape;
    auto xv = tape.leaf(x);
    tape.backward(ad::sum(ad::square(ad::tanh(ad::matmul(tape.constant(a), xv)))));
    return Eigen::VectorXd(tape.grad(xv));
  };

  ad::Tape<Dual> tape;
  ad::Mat<Dual> xd(3, 1);
  for (int i = 0; i < 3; ++i) xd(i, 0) = Dual(x0(i), u(i));
  auto xv = tape.leaf(xd);
  tape.backward(ad::sum(ad::square(ad::tanh(ad::matmul(tape.constant(a.cast<Dual>()), xv)))));
  const ad::Mat<Dual> g = tape.grad(xv);

  const double h = 1e-5;
  const Eigen::VectorXd hu = (grad_at(x0 + h * u) - grad_at(x0 - h * u)) / (2.0 * h);
  const Eigen::VectorXd g0 = grad_at(x0);
  for (int i = 0; i < 3; ++i) {
    CHECK(g(i, 0).v == doctest::Approx(g0(i)).epsilon(1e-12));
    CHECK(g(i, 0).d == doctest::Approx(hu(i)).epsilon(1e-6));
  }
}
