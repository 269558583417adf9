#pragma once

#include "chainfl/cli.hpp"
#include "chainfl/config.hpp"
#include "chainfl/device.hpp"
#include "chainfl/error.hpp"
#include "chainfl/fl_task.hpp"
#include "chainfl/harness.hpp"
#include "chainfl/mainchain.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/rng.hpp"
#include "chainfl/simnet.hpp"
#include "chainfl/store.hpp"
#include "chainfl/subchain.hpp"
#include "chainfl/subchain_tx.hpp"
