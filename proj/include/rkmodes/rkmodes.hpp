#pragma once

#include "audit.hpp"
#include "identifiability.hpp"
#include "inference.hpp"
#include "integrators.hpp"
#include "mixture.hpp"
#include "ode_models.hpp"
#include "simulate.hpp"
