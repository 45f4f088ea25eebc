#pragma once

// Everything in one include.

#include "relcbm/config.hpp"
#include "relcbm/dataset.hpp"
#include "relcbm/encoders.hpp"
#include "relcbm/error.hpp"
#include "relcbm/generators.hpp"
#include "relcbm/grounding.hpp"
#include "relcbm/logic.hpp"
#include "relcbm/loss.hpp"
#include "relcbm/model.hpp"
#include "relcbm/nn.hpp"
#include "relcbm/predictors.hpp"
#include "relcbm/properties.hpp"
#include "relcbm/template_parser.hpp"
#include "relcbm/tensor.hpp"
#include "relcbm/trainer.hpp"
