#pragma once

// Umbrella include for the whole toolkit.

#include "pqkv/allocate.hpp"
#include "pqkv/attention.hpp"
#include "pqkv/cache.hpp"
#include "pqkv/calib.hpp"
#include "pqkv/error.hpp"
#include "pqkv/quant.hpp"
#include "pqkv/sensitivity.hpp"
#include "pqkv/shrink.hpp"
#include "pqkv/simulate.hpp"
#include "pqkv/synth.hpp"
#include "pqkv/tensor.hpp"
#include "pqkv/tensor_io.hpp"
