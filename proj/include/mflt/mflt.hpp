#pragma once

#include "mflt/bridge.hpp"
#include "mflt/common.hpp"
#include "mflt/evaluate.hpp"
#include "mflt/io.hpp"
#include "mflt/objective.hpp"
#include "mflt/optimizer.hpp"
#include "mflt/parallel.hpp"
#include "mflt/pathspace.hpp"
#include "mflt/rng.hpp"
#include "mflt/simulate.hpp"
#include "mflt/types.hpp"
