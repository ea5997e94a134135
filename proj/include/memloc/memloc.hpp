#pragma once

// Umbrella header.
#include "memloc/error.hpp"
#include "memloc/rng.hpp"
#include "memloc/tensor.hpp"
#include "memloc/gradcheck.hpp"
#include "memloc/model.hpp"
#include "memloc/optim.hpp"
#include "memloc/taskgen.hpp"
#include "memloc/trainer.hpp"
#include "memloc/checkpoint.hpp"
#include "memloc/jobs.hpp"
#include "memloc/probe.hpp"
#include "memloc/localisation.hpp"
#include "memloc/analysis.hpp"
#include "memloc/heatmap.hpp"
#include "memloc/experiment.hpp"
