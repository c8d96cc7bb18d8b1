#pragma once

#include "dhkd/collapse.hpp"
#include "dhkd/config.hpp"
#include "dhkd/data.hpp"
#include "dhkd/grad_theory.hpp"
#include "dhkd/harness.hpp"
#include "dhkd/losses.hpp"
#include "dhkd/matrix.hpp"
#include "dhkd/model.hpp"
#include "dhkd/model_io.hpp"
#include "dhkd/numerics.hpp"
#include "dhkd/rng.hpp"
#include "dhkd/verify.hpp"
