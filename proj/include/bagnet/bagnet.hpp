#pragma once

#include "bagnet/tensor.hpp"
#include "bagnet/kernels.hpp"
#include "bagnet/autodiff.hpp"
#include "bagnet/gradcheck.hpp"
#include "bagnet/random.hpp"
#include "bagnet/model.hpp"
#include "bagnet/checkpoint.hpp"
#include "bagnet/pnm.hpp"
#include "bagnet/synthdata.hpp"
#include "bagnet/heatmap.hpp"
#include "bagnet/metrics.hpp"
#include "bagnet/trainer.hpp"
#include "bagnet/eval.hpp"
#include "bagnet/config.hpp"
