#pragma once

#include "transmix/numerics/adam.hpp"
#include "transmix/numerics/gradcheck.hpp"
#include "transmix/numerics/linear.hpp"
#include "transmix/numerics/ops.hpp"
#include "transmix/numerics/tape.hpp"
#include "transmix/numerics/tensor.hpp"
