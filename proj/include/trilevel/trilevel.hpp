#ifndef TRILEVEL_TRILEVEL_HPP
#define TRILEVEL_TRILEVEL_HPP

#include "trilevel/attention_record.hpp"
#include "trilevel/checkpoint.hpp"
#include "trilevel/config.hpp"
#include "trilevel/data.hpp"
#include "trilevel/errors.hpp"
#include "trilevel/forgetting.hpp"
#include "trilevel/mac_counter.hpp"
#include "trilevel/macs.hpp"
#include "trilevel/ops.hpp"
#include "trilevel/optim.hpp"
#include "trilevel/parallel.hpp"
#include "trilevel/selector.hpp"
#include "trilevel/subset.hpp"
#include "trilevel/tensor.hpp"
#include "trilevel/train.hpp"
#include "trilevel/vit.hpp"

#endif  // TRILEVEL_TRILEVEL_HPP
