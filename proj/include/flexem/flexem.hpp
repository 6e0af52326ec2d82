#pragma once

#include "flexem/types.hpp"
#include "flexem/format.hpp"
#include "flexem/config.hpp"
#include "flexem/elliptic.hpp"
#include "flexem/estimators.hpp"
#include "flexem/kmeans.hpp"
#include "flexem/fem.hpp"
#include "flexem/baselines.hpp"
#include "flexem/metrics.hpp"
#include "flexem/harness.hpp"
