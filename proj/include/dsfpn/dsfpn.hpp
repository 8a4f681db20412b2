#pragma once

#include "dsfpn/ablation.hpp"
#include "dsfpn/annotations.hpp"
#include "dsfpn/box.hpp"
#include "dsfpn/checkpoint.hpp"
#include "dsfpn/config.hpp"
#include "dsfpn/dataset.hpp"
#include "dsfpn/heads.hpp"
#include "dsfpn/instrument.hpp"
#include "dsfpn/metrics.hpp"
#include "dsfpn/model.hpp"
#include "dsfpn/ops.hpp"
#include "dsfpn/params.hpp"
#include "dsfpn/pyramid.hpp"
#include "dsfpn/roi_align.hpp"
#include "dsfpn/rpn.hpp"
#include "dsfpn/sampling.hpp"
#include "dsfpn/targets.hpp"
#include "dsfpn/tensor.hpp"
#include "dsfpn/training.hpp"
