#pragma once

#include "persona_guard/attack.hpp"
#include "persona_guard/checkpoint.hpp"
#include "persona_guard/classifier.hpp"
#include "persona_guard/cluster.hpp"
#include "persona_guard/corpus.hpp"
#include "persona_guard/defense.hpp"
#include "persona_guard/error.hpp"
#include "persona_guard/experiment.hpp"
#include "persona_guard/io.hpp"
#include "persona_guard/lm.hpp"
#include "persona_guard/metrics.hpp"
#include "persona_guard/optim.hpp"
#include "persona_guard/pipeline.hpp"
#include "persona_guard/rng.hpp"
#include "persona_guard/tokenizer.hpp"
