#pragma once

// Umbrella header.

#include "gradnet/autodiff.hpp"
#include "gradnet/checkpoint.hpp"
#include "gradnet/common.hpp"
#include "gradnet/config.hpp"
#include "gradnet/data.hpp"
#include "gradnet/eval.hpp"
#include "gradnet/image.hpp"
#include "gradnet/labels.hpp"
#include "gradnet/net.hpp"
#include "gradnet/plot.hpp"
#include "gradnet/tensor.hpp"
#include "gradnet/tracking.hpp"
#include "gradnet/training.hpp"
#include "gradnet/update_branch.hpp"
