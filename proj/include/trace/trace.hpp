#pragma once

#include "trace/bench.hpp"
#include "trace/error.hpp"
#include "trace/fusion.hpp"
#include "trace/ingest.hpp"
#include "trace/metrics.hpp"
#include "trace/pipeline.hpp"
#include "trace/scoring.hpp"
#include "trace/synth.hpp"
#include "trace/trace_bank.hpp"
#include "trace/vecmath.hpp"
