#pragma once

#include "unimeec/ablation.hpp"
#include "unimeec/checkpoint.hpp"
#include "unimeec/cli.hpp"
#include "unimeec/config.hpp"
#include "unimeec/corpus.hpp"
#include "unimeec/encoder.hpp"
#include "unimeec/gradcheck.hpp"
#include "unimeec/metrics.hpp"
#include "unimeec/model.hpp"
#include "unimeec/objective.hpp"
#include "unimeec/prompt.hpp"
#include "unimeec/thc.hpp"
#include "unimeec/trainer.hpp"
