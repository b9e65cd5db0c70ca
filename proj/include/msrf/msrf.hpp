#pragma once

#include "msrf/error.hpp"
#include "msrf/tensor.hpp"
#include "msrf/random.hpp"
#include "msrf/parallel.hpp"
#include "msrf/autodiff.hpp"
#include "msrf/ops.hpp"
#include "msrf/params.hpp"
#include "msrf/blocks.hpp"
#include "msrf/dsdf.hpp"
#include "msrf/msrf_subnet.hpp"
#include "msrf/losses.hpp"
#include "msrf/network.hpp"
#include "msrf/metrics.hpp"
#include "msrf/data.hpp"
#include "msrf/optim.hpp"
#include "msrf/gradcheck.hpp"
#include "msrf/trainer.hpp"
