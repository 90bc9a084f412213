#pragma once

#include "mesh4d/autograd.hpp"
#include "mesh4d/common.hpp"
#include "mesh4d/flow.hpp"
#include "mesh4d/io.hpp"
#include "mesh4d/mesh.hpp"
#include "mesh4d/metrics.hpp"
#include "mesh4d/nn.hpp"
#include "mesh4d/skeleton.hpp"
#include "mesh4d/synth.hpp"
#include "mesh4d/tensor.hpp"
#include "mesh4d/vae.hpp"
