#pragma once

// Everything at once.
#include "relook/error.hpp"
#include "relook/tensor.hpp"
#include "relook/autograd.hpp"
#include "relook/vocab.hpp"
#include "relook/scene.hpp"
#include "relook/sequence.hpp"
#include "relook/model.hpp"
#include "relook/trace_grammar.hpp"
#include "relook/rewards.hpp"
#include "relook/reattention.hpp"
#include "relook/brpo.hpp"
#include "relook/metrics.hpp"
#include "relook/harness.hpp"
