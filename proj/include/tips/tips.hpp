#pragma once

#include "tips/tensor.hpp"
#include "tips/rng.hpp"
#include "tips/autodiff.hpp"
#include "tips/optim.hpp"
#include "tips/nn.hpp"
#include "tips/pooling.hpp"
#include "tips/shift.hpp"
#include "tips/regularizers.hpp"
#include "tips/data.hpp"
#include "tips/model.hpp"
#include "tips/metrics.hpp"
#include "tips/config.hpp"
#include "tips/checkpoint.hpp"
#include "tips/harness.hpp"
