#pragma once

#include "momoe/tensor.hpp"
#include "momoe/optim.hpp"
#include "momoe/moe.hpp"
#include "momoe/dynamics.hpp"
#include "momoe/stability.hpp"
#include "momoe/mgda.hpp"
#include "momoe/diagnostics.hpp"
#include "momoe/model.hpp"
#include "momoe/tasks.hpp"
#include "momoe/config.hpp"
#include "momoe/experiment.hpp"
