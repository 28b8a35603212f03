// Umbrella header for the whole library.
#pragma once

#include "nlf/common.hpp"
#include "nlf/tensor.hpp"
#include "nlf/tape.hpp"
#include "nlf/mlp.hpp"
#include "nlf/geom.hpp"
#include "nlf/mesh.hpp"
#include "nlf/sdf_grid.hpp"
#include "nlf/base_shape.hpp"
#include "nlf/deformation.hpp"
#include "nlf/losses.hpp"
#include "nlf/registration.hpp"
#include "nlf/checkpoint.hpp"
#include "nlf/io.hpp"
#include "nlf/training.hpp"
#include "nlf/fitting.hpp"
#include "nlf/dataset_io.hpp"
