/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include "qsgd/bounds.hpp"
#include "qsgd/engine.hpp"
#include "qsgd/harness.hpp"
#include "qsgd/parallel.hpp"
#include "qsgd/quantizers.hpp"
#include "qsgd/risk.hpp"
#include "qsgd/rng.hpp"
#include "qsgd/spectrum.hpp"
