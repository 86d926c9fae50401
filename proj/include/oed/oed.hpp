#pragma once

#include "oed/errors.hpp"
#include "oed/model.hpp"
#include "oed/statistics.hpp"
#include "oed/qp.hpp"
#include "oed/nlp.hpp"
#include "oed/estimation.hpp"
#include "oed/geometry.hpp"
#include "oed/sensitivity.hpp"
#include "oed/design.hpp"
#include "oed/experiments.hpp"
