// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rellax/adapter.hpp"
#include "rellax/checkpoint.hpp"
#include "rellax/crm.hpp"
#include "rellax/data.hpp"
#include "rellax/error.hpp"
#include "rellax/experiment.hpp"
#include "rellax/item_encoder.hpp"
#include "rellax/lm.hpp"
#include "rellax/metrics.hpp"
#include "rellax/numerics.hpp"
#include "rellax/pipeline.hpp"
#include "rellax/prompt.hpp"
#include "rellax/selftest.hpp"
#include "rellax/subr.hpp"
