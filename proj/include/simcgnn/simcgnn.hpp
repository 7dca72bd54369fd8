#pragma once

#include "adam.hpp"
#include "autodiff.hpp"
#include "bundle.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "contrastive.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "session_graph.hpp"
#include "tensor.hpp"
#include "training.hpp"
#include "version.hpp"
