#pragma once

#include "colorgan/checkpoint.hpp"
#include "colorgan/colorspace.hpp"
#include "colorgan/config.hpp"
#include "colorgan/image_io.hpp"
#include "colorgan/losses.hpp"
#include "colorgan/metrics.hpp"
#include "colorgan/netmodel.hpp"
#include "colorgan/ops.hpp"
#include "colorgan/optim.hpp"
#include "colorgan/params.hpp"
#include "colorgan/pipeline.hpp"
#include "colorgan/swin.hpp"
#include "colorgan/tensor.hpp"
