#pragma once

#include "relprop/eval.hpp"
#include "relprop/imaging.hpp"
#include "relprop/model.hpp"
#include "relprop/propagation.hpp"
#include "relprop/tensor.hpp"
