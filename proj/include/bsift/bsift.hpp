#pragma once

#include "bsift/attacks.hpp"
#include "bsift/bundle_io.hpp"
#include "bsift/classifier.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"
#include "bsift/metrics.hpp"
#include "bsift/mspc.hpp"
#include "bsift/nn/network.hpp"
#include "bsift/spc.hpp"
#include "bsift/toy_dataset.hpp"
#include "bsift/trainer.hpp"
#include "bsift/trigger_io.hpp"
#include "bsift/version.hpp"
