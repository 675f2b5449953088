#pragma once

#include "fedlfd/aggregation.hpp"
#include "fedlfd/checkpoint.hpp"
#include "fedlfd/config.hpp"
#include "fedlfd/cross_task.hpp"
#include "fedlfd/error.hpp"
#include "fedlfd/harness.hpp"
#include "fedlfd/node.hpp"
#include "fedlfd/seed.hpp"
#include "fedlfd/taxonomy.hpp"
#include "fedlfd/tensor.hpp"
