#pragma once

#include "frieren/errors.hpp"
#include "frieren/tensor.hpp"
#include "frieren/rng.hpp"
#include "frieren/model.hpp"
#include "frieren/sched.hpp"
#include "frieren/loss.hpp"
#include "frieren/augment.hpp"
#include "frieren/objective.hpp"
#include "frieren/eval.hpp"
#include "frieren/synthdata.hpp"
#include "frieren/fed.hpp"
#include "frieren/gradcheck.hpp"
#include "frieren/io.hpp"
#include "frieren/protocol.hpp"
