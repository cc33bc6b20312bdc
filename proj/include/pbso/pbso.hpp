#pragma once

#include "pbso/common.hpp"
#include "pbso/config.hpp"
#include "pbso/credit.hpp"
#include "pbso/harness.hpp"
#include "pbso/optimizer.hpp"
#include "pbso/policy.hpp"
#include "pbso/remote_verifier.hpp"
#include "pbso/synthenv.hpp"
#include "pbso/transcript.hpp"
#include "pbso/verifiers.hpp"
