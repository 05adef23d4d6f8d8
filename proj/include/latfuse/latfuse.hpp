#pragma once

// Umbrella header for the full fusion stack.

#include "latfuse/autodiff.hpp"
#include "latfuse/bench.hpp"
#include "latfuse/calib.hpp"
#include "latfuse/errors.hpp"
#include "latfuse/flops.hpp"
#include "latfuse/latent_fusion.hpp"
#include "latfuse/layers.hpp"
#include "latfuse/pipeline.hpp"
#include "latfuse/random.hpp"
#include "latfuse/sampling.hpp"
#include "latfuse/selfcheck.hpp"
#include "latfuse/space_align.hpp"
#include "latfuse/tensor.hpp"
#include "latfuse/voxel.hpp"
