#pragma once

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "core.hpp"
#include "csv.hpp"
#include "data.hpp"
#include "denoiser.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "preprocessor.hpp"
#include "sampling.hpp"
#include "schedule.hpp"
