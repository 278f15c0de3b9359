#pragma once

#include "m3p/alignment.hpp"
#include "m3p/augment.hpp"
#include "m3p/bleu.hpp"
#include "m3p/checkpoint.hpp"
#include "m3p/config.hpp"
#include "m3p/data.hpp"
#include "m3p/encoders.hpp"
#include "m3p/evaluate.hpp"
#include "m3p/fusion.hpp"
#include "m3p/image.hpp"
#include "m3p/model.hpp"
#include "m3p/nn.hpp"
#include "m3p/ops.hpp"
#include "m3p/optim.hpp"
#include "m3p/rng.hpp"
#include "m3p/tensor.hpp"
#include "m3p/toy_corpus.hpp"
#include "m3p/train.hpp"
