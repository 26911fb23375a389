#pragma once

#include "lgqave/numcore/adam.hpp"
#include "lgqave/numcore/attention.hpp"
#include "lgqave/numcore/autograd.hpp"
#include "lgqave/numcore/gradcheck.hpp"
#include "lgqave/numcore/params.hpp"
#include "lgqave/numcore/rng.hpp"
#include "lgqave/numcore/tensor.hpp"
