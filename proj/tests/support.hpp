// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace lego::testing {

/// |sample mean - mu| and |sample var - var| both within `k` standard errors.
inline ::testing::AssertionResult moments_match(const Moments& m, double mu, double var, double k = 3.0) {
  const auto z = moment_scores(m, mu, var);
  if (std::abs(z.z_mean) <= k && std::abs(z.z_var) <= k) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << "mean " << m.mean << " vs " << mu << " (z=" << z.z_mean << "), var " << m.var
                                       << " vs " << var << " (z=" << z.z_var << ")";
}

}  // namespace lego::testing
