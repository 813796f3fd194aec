#pragma once

#include "sliceattn/attention.hpp"
#include "sliceattn/attention_dump.hpp"
#include "sliceattn/autograd.hpp"
#include "sliceattn/binary_io.hpp"
#include "sliceattn/boxes.hpp"
#include "sliceattn/config.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/eval.hpp"
#include "sliceattn/evaluate.hpp"
#include "sliceattn/gradcheck.hpp"
#include "sliceattn/manifest.hpp"
#include "sliceattn/ops.hpp"
#include "sliceattn/params.hpp"
#include "sliceattn/pipeline.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/synthdata.hpp"
#include "sliceattn/tensor.hpp"
#include "sliceattn/train.hpp"
