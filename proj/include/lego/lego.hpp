// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "lego/accounting.hpp"
#include "lego/brick.hpp"
#include "lego/config.hpp"
#include "lego/dataset.hpp"
#include "lego/diffusion_math.hpp"
#include "lego/errors.hpp"
#include "lego/harness.hpp"
#include "lego/images.hpp"
#include "lego/nn.hpp"
#include "lego/panorama.hpp"
#include "lego/patch_grid.hpp"
#include "lego/rng.hpp"
#include "lego/sampler.hpp"
#include "lego/skip.hpp"
#include "lego/stack.hpp"
#include "lego/tensor.hpp"
#include "lego/trainer.hpp"
