#pragma once

#include "flute/numerics.hpp"
#include "flute/parallel.hpp"
#include "flute/model.hpp"
#include "flute/synthgen.hpp"
#include "flute/metrics.hpp"
#include "flute/theory_diag.hpp"
#include "flute/flute_linear.hpp"
#include "flute/fedrep.hpp"
#include "flute/general_flute.hpp"
