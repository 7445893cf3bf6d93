#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "fprb/parallel.hpp"
#include "fprb/rng.hpp"
#include "fprb/stats.hpp"
#include "fprb/table.hpp"

using namespace fprb;

namespace {

// Type-7 quantile written from the textbook formula h = (n - 1) q + 1.
double quantile7(std::vector<double> x, double q) {
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * q + 1.0;
  const auto fl = static_cast<std::size_t>(std::floor(h));
  if (fl >= x.size()) return x.back();
  return x[fl - 1] + (h - static_cast<double>(fl)) * (x[fl] - x[fl - 1]);
}

}  // namespace

TEST_SUITE("stats") {
  TEST_CASE("streams are keyed by seed, tag and index") {
    Stream a(1, "t", 0), b(1, "t", 0), c(1, "t", 1), d(1, "u", 0), e(2, "t", 0);
    const auto x = a();
    CHECK(x == b());
    CHECK(x != c());
    CHECK(x != d());
    CHECK(x != e());
  }

  TEST_CASE("below is in range and roughly uniform") {
    Stream s(3, "below", 0);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) {
      const auto v = s.below(7);
      REQUIRE(v < 7);
      ++counts[v];
    }
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
    CHECK(s.below(1) == 0);
    CHECK(s.below(0) == 0);
  }

  TEST_CASE("uniform and normal moments") {
    Stream s(4, "moments", 0);
    double su = 0, sn = 0, sn2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double u = s.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
      su += u;
      const double z = s.normal();
      sn += z;
      sn2 += z * z;
    }
    CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(std::abs(sn / n) < 0.01);
    CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
  }

  TEST_CASE("shuffle is a permutation") {
    Stream s(5, "shuffle", 0);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    shuffle(v, s);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
    CHECK(v != sorted);
  }

  TEST_CASE("parallel_for writes by index and rethrows") {
    std::vector<std::size_t> out(1000, 0);
    parallel_for(out.size(), 8, [&](std::size_t i) { out[i] = i * i; });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == i * i);
    CHECK_THROWS_AS(parallel_for(100, 4,
                                 [](std::size_t i) {
                                   if (i == 37) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
  }

  TEST_CASE("mean, median and type-7 percentiles") {
    const std::vector<double> v{3, 1, 4, 1, 5, 9, 2, 6};
    CHECK(mean(v) == doctest::Approx(31.0 / 8));
    CHECK(median(v) == doctest::Approx(3.5));
    Stream s(6, "pct", 0);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> x(1 + s.below(40));
      for (auto& e : x) e = s.normal();
      const double q = s.uniform();
      CHECK(percentile(x, q) == doctest::Approx(quantile7(x, q)).epsilon(1e-12));
    }
    CHECK_THROWS(percentile(std::vector<double>{}, 0.5));
    CHECK_THROWS(percentile(v, 1.5));
  }

  TEST_CASE("bootstrap degenerate inputs") {
    BootstrapOptions o{.resamples = 500, .seed = 9};
    const std::vector<double> c(20, 2.5);
    auto ci = bootstrap_ci(c, o);
    CHECK(ci.point == 2.5);
    CHECK(ci.lower == 2.5);
    CHECK(ci.upper == 2.5);
    ci = bootstrap_ci(std::vector<double>{-1.25}, o);
    CHECK(ci.lower == -1.25);
    CHECK(ci.upper == -1.25);
    CHECK(ci.n == 1);
  }

  TEST_CASE("bootstrap matches an independent replay of its resampling protocol") {
    Stream s(10, "data", 0);
    std::vector<double> x(30);
    for (auto& e : x) e = s.normal();
    BootstrapOptions o{.resamples = 400, .seed = 77, .level = 0.9, .tag = "replay"};
    const auto ci = bootstrap_ci(x, o);
    std::vector<double> stats;
    for (std::size_t b = 0; b < o.resamples; ++b) {
      Stream r(77, "replay", b);
      double sum = 0;
      for (std::size_t i = 0; i < x.size(); ++i) sum += x[r.below(x.size())];
      stats.push_back(sum / static_cast<double>(x.size()));
    }
    CHECK(ci.lower == doctest::Approx(quantile7(stats, 0.05)).epsilon(1e-12));
    CHECK(ci.upper == doctest::Approx(quantile7(stats, 0.95)).epsilon(1e-12));
    CHECK(ci.point == doctest::Approx(mean(x)));
    o.workers = 8;
    const auto par = bootstrap_ci(x, o);
    CHECK(par.lower == ci.lower);
    CHECK(par.upper == ci.upper);
  }

  TEST_CASE("ratio bootstrap clusters by case") {
    const std::vector<double> num{1, 2, 3, 0};
    const std::vector<double> den{2, 2, 4, 2};
    const auto ci = bootstrap_ratio_ci(num, den, {.resamples = 300, .seed = 1});
    CHECK(ci.point == doctest::Approx(0.6));
    CHECK(ci.lower <= ci.point);
    CHECK(ci.upper >= ci.point);
    CHECK(ci.lower >= 0.0);
    CHECK(ci.upper <= 1.0);
    CHECK_THROWS(bootstrap_ratio_ci(num, std::vector<double>{0, 0, 0, 0}, {}));
  }

  TEST_CASE("binomial coefficients") {
    CHECK(binomial_coefficient(5, 2) == 10);
    CHECK(binomial_coefficient(30, 15) == 155117520);
    CHECK(binomial_coefficient(4, 5) == 0);
    CHECK(binomial_coefficient(7, 0) == 1);
  }

  TEST_CASE("text tables") {
    CHECK(fixed(-0.0001, 3) == "0.000");
    CHECK(fixed(1.23456, 2) == "1.23");
    CHECK(fixed(std::optional<double>{}, 2) == "n/a");
    CHECK(percent(0.0669, 2) == "6.69%");
    CHECK(interval(0.1, 0.25, 2) == "[0.10, 0.25]");
    TextTable t("cap", {{"a", 3, true}, {"b", 5}});
    t.add_row({"x", "1.0"});
    const auto text = t.render();
    CHECK(text.find("cap") == 0);
    CHECK(text.find("x      1.0") != std::string::npos);
    CHECK_THROWS(t.add_row({"only one"}));
  }
}
