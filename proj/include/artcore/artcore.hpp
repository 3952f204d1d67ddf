#pragma once

#include "artcore/backend.hpp"
#include "artcore/config.hpp"
#include "artcore/core.hpp"
#include "artcore/frontend.hpp"
#include "artcore/gaussian_map.hpp"
#include "artcore/image.hpp"
#include "artcore/lie.hpp"
#include "artcore/map_optimizer.hpp"
#include "artcore/pipeline.hpp"
#include "artcore/pointmap.hpp"
#include "artcore/pointmap_io.hpp"
#include "artcore/providers.hpp"
#include "artcore/renderer.hpp"
#include "artcore/trajectory_io.hpp"
