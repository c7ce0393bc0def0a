#pragma once

#include "fnsm/config.hpp"
#include "fnsm/data.hpp"
#include "fnsm/errors.hpp"
#include "fnsm/experiment.hpp"
#include "fnsm/federation.hpp"
#include "fnsm/local_opt.hpp"
#include "fnsm/metrics.hpp"
#include "fnsm/objective.hpp"
#include "fnsm/param_vector.hpp"
#include "fnsm/rng.hpp"
