#pragma once

#include "nce/error.hpp"
#include "nce/random.hpp"
#include "nce/dataset.hpp"
#include "nce/dgp.hpp"
#include "nce/models.hpp"
#include "nce/objectives.hpp"
#include "nce/estimators.hpp"
#include "nce/icp.hpp"
#include "nce/theory.hpp"
#include "nce/harness.hpp"
#include "nce/serialize.hpp"
