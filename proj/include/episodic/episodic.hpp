#pragma once

// Everything: tensors and autodiff, corpus handling, tokenizer, encoder,
// objectives, training, evaluation protocols, baselines and experiment
// plumbing.

#include "episodic/autodiff.hpp"
#include "episodic/baselines.hpp"
#include "episodic/corpus.hpp"
#include "episodic/encoder.hpp"
#include "episodic/evaluation.hpp"
#include "episodic/experiment.hpp"
#include "episodic/grad_check.hpp"
#include "episodic/json_config.hpp"
#include "episodic/objectives.hpp"
#include "episodic/ops.hpp"
#include "episodic/rng.hpp"
#include "episodic/synth.hpp"
#include "episodic/tensor.hpp"
#include "episodic/tokenizer.hpp"
#include "episodic/trainer.hpp"
