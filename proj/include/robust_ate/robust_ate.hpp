#pragma once

#include "robust_ate/error.hpp"
#include "robust_ate/rng.hpp"
#include "robust_ate/data_model.hpp"
#include "robust_ate/cbps.hpp"
#include "robust_ate/robust_outcome.hpp"
#include "robust_ate/penalized_el.hpp"
#include "robust_ate/ate.hpp"
#include "robust_ate/finite_sample_ci.hpp"
#include "robust_ate/datagen.hpp"
#include "robust_ate/ingest.hpp"
#include "robust_ate/parallel.hpp"
#include "robust_ate/experiments.hpp"
