#pragma once

#include "palmot/core.hpp"
#include "palmot/torus.hpp"
#include "palmot/transport.hpp"
#include "palmot/palm_wasserstein.hpp"
#include "palmot/dynamics.hpp"
#include "palmot/bb_grid.hpp"
#include "palmot/generators.hpp"
#include "palmot/model_io.hpp"
#include "palmot/verify.hpp"

namespace palmot {
inline constexpr const char* version = "0.1.0";
}
