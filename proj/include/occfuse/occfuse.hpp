#pragma once

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/ingest.hpp"
#include "occfuse/instances.hpp"
#include "occfuse/lift.hpp"
#include "occfuse/metrics.hpp"
#include "occfuse/pipeline.hpp"
#include "occfuse/raster.hpp"
#include "occfuse/refine.hpp"
#include "occfuse/synth.hpp"
#include "occfuse/taxonomy.hpp"
#include "occfuse/voxelize.hpp"
