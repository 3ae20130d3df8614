#pragma once

#include "pafu/autodiff.hpp"
#include "pafu/checkpoint.hpp"
#include "pafu/datasets.hpp"
#include "pafu/error.hpp"
#include "pafu/gradcheck.hpp"
#include "pafu/losses.hpp"
#include "pafu/models.hpp"
#include "pafu/ops.hpp"
#include "pafu/pafu_unit.hpp"
#include "pafu/png_io.hpp"
#include "pafu/rng.hpp"
#include "pafu/tensor.hpp"
#include "pafu/training.hpp"
