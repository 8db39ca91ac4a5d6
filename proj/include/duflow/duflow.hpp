#pragma once

#include "duflow/checkpoint.hpp"
#include "duflow/error.hpp"
#include "duflow/flow_io.hpp"
#include "duflow/gradcheck.hpp"
#include "duflow/graph.hpp"
#include "duflow/loss.hpp"
#include "duflow/network.hpp"
#include "duflow/ops.hpp"
#include "duflow/optim.hpp"
#include "duflow/scene.hpp"
#include "duflow/tensor.hpp"
#include "duflow/trainer.hpp"
#include "duflow/warp.hpp"
