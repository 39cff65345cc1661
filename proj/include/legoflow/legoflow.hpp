// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "legoflow/autodiff.hpp"
#include "legoflow/batchnorm.hpp"
#include "legoflow/checkpoint.hpp"
#include "legoflow/cka.hpp"
#include "legoflow/config.hpp"
#include "legoflow/error.hpp"
#include "legoflow/finetune.hpp"
#include "legoflow/lego.hpp"
#include "legoflow/metrics.hpp"
#include "legoflow/model.hpp"
#include "legoflow/parameter.hpp"
#include "legoflow/rng.hpp"
#include "legoflow/schedule.hpp"
#include "legoflow/simt.hpp"
#include "legoflow/tasks.hpp"
#include "legoflow/tensor.hpp"
