#pragma once

#include "gma/core.hpp"
#include "gma/binary.hpp"
#include "gma/gma.hpp"
#include "gma/correlation.hpp"
#include "gma/encoder.hpp"
#include "gma/refinement.hpp"
#include "gma/metrics.hpp"
#include "gma/synth.hpp"
#include "gma/viz_io.hpp"
#include "gma/gradcheck.hpp"
