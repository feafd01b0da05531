#pragma once

#include "ducisc/array_io.hpp"
#include "ducisc/datasets.hpp"
#include "ducisc/errors.hpp"
#include "ducisc/fusion.hpp"
#include "ducisc/losses.hpp"
#include "ducisc/metrics.hpp"
#include "ducisc/prototypes.hpp"
#include "ducisc/pseudo.hpp"
#include "ducisc/random.hpp"
#include "ducisc/segnet.hpp"
#include "ducisc/tensor.hpp"
#include "ducisc/trainer.hpp"
