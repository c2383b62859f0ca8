#pragma once

// Everything at once.

#include "stagegen/adam.hpp"
#include "stagegen/checkpoint.hpp"
#include "stagegen/config.hpp"
#include "stagegen/dataset.hpp"
#include "stagegen/error.hpp"
#include "stagegen/grad_check.hpp"
#include "stagegen/image.hpp"
#include "stagegen/image_io.hpp"
#include "stagegen/metrics.hpp"
#include "stagegen/models.hpp"
#include "stagegen/ops.hpp"
#include "stagegen/parallel.hpp"
#include "stagegen/pipeline.hpp"
#include "stagegen/plot.hpp"
#include "stagegen/rng.hpp"
#include "stagegen/tensor.hpp"
#include "stagegen/training.hpp"
