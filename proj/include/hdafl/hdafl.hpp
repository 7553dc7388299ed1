#pragma once

#include "hdafl/autodiff.hpp"
#include "hdafl/checkpoint.hpp"
#include "hdafl/common.hpp"
#include "hdafl/config.hpp"
#include "hdafl/dataset.hpp"
#include "hdafl/episodes.hpp"
#include "hdafl/eval.hpp"
#include "hdafl/losses.hpp"
#include "hdafl/model.hpp"
#include "hdafl/rng.hpp"
#include "hdafl/synthetic.hpp"
#include "hdafl/tensor.hpp"
#include "hdafl/trainer.hpp"
