#pragma once

#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"
#include "subjepa/subspace.hpp"
#include "subjepa/normality.hpp"
#include "subjepa/mlp.hpp"
#include "subjepa/envs.hpp"
#include "subjepa/worldmodel.hpp"
#include "subjepa/planner.hpp"
#include "subjepa/metrics.hpp"
#include "subjepa/harness.hpp"
