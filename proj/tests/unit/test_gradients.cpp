#include <gtest/gtest.h>

#include "gradchecks.hpp"

namespace vkn::testing {
namespace {

TEST(Gradients, EveryModuleMatchesCentralDifferences) {
  const auto checks = run_module_gradchecks();
  ASSERT_GE(checks.size(), 20u);
  for (const auto& c : checks) {
    EXPECT_GT(c.result.checked, 0) << c.module;
    EXPECT_LE(c.result.max_rel_error, 1e-4) << c.module << " worst at " << c.result.worst;
  }
}

TEST(Gradients, CheckerDetectsAWrongGradient) {
  // x[0]^2 is computed outside the graph, so its analytic gradient is missing.
  const Var x = leaf(Tensor({2}, std::vector<double>{0.3, -0.7}));
  auto f = [&] {
    const double detached = x.value()[0];
    return ag::add(ag::sum(x), ag::constant(Tensor::scalar(detached * detached)));
  };
  const GradCheckResult r = gradcheck(f, {{"x", x}});
  EXPECT_GT(r.max_rel_error, 1e-2);
  EXPECT_EQ(r.worst, "x[0]");
}

}  // namespace
}  // namespace vkn::testing
