#pragma once

// Everything in one include.

#include "stac/codec.hpp"
#include "stac/config.hpp"
#include "stac/flow.hpp"
#include "stac/pipeline.hpp"
#include "stac/segmentation.hpp"
#include "stac/sensitivity.hpp"
#include "stac/strategy.hpp"
#include "stac/synthetic.hpp"
#include "stac/temporal.hpp"
#include "stac/transport.hpp"
