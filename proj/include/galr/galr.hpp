#pragma once

// Umbrella header for the GALR separation library.

#include "galr/blocks.hpp"
#include "galr/checkpoint.hpp"
#include "galr/common.hpp"
#include "galr/config.hpp"
#include "galr/cost_model.hpp"
#include "galr/frontend.hpp"
#include "galr/gradcheck.hpp"
#include "galr/lstm.hpp"
#include "galr/ops.hpp"
#include "galr/separator.hpp"
#include "galr/tensor.hpp"
#include "galr/training.hpp"
#include "galr/wav.hpp"
