#pragma once

#include "attention.hpp"
#include "backbone.hpp"
#include "bench.hpp"
#include "codec.hpp"
#include "config.hpp"
#include "digest.hpp"
#include "features.hpp"
#include "image.hpp"
#include "merge.hpp"
#include "noise.hpp"
#include "pipeline.hpp"
#include "png_io.hpp"
#include "schedule.hpp"
#include "seac.hpp"
#include "tensor.hpp"
#include "toy_backbone.hpp"
