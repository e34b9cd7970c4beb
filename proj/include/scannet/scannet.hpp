#pragma once

// Umbrella header for the semantic change detection library.

#include "scannet/tensor.hpp"
#include "scannet/autograd.hpp"
#include "scannet/ops.hpp"
#include "scannet/config.hpp"
#include "scannet/types.hpp"
#include "scannet/metrics.hpp"
#include "scannet/params.hpp"
#include "scannet/backbone.hpp"
#include "scannet/attention.hpp"
#include "scannet/objectives.hpp"
#include "scannet/model.hpp"
#include "scannet/dataio.hpp"
#include "scannet/trainer.hpp"
