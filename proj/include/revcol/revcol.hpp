#pragma once

#include "revcol/bench.hpp"
#include "revcol/checkpoint.hpp"
#include "revcol/cka.hpp"
#include "revcol/common.hpp"
#include "revcol/config.hpp"
#include "revcol/data.hpp"
#include "revcol/kernels.hpp"
#include "revcol/memtrack.hpp"
#include "revcol/model.hpp"
#include "revcol/optim.hpp"
#include "revcol/reversible.hpp"
#include "revcol/rng.hpp"
#include "revcol/tape.hpp"
#include "revcol/tensor.hpp"
#include "revcol/train.hpp"
