#pragma once

// Umbrella header for the PN-SAMP library: multi-task volumetric network for
// joint nodule segmentation, attribute rating and malignancy prediction,
// with its preprocessing pipeline and a synthetic phantom dataset.

#include "pnsamp/autodiff.hpp"
#include "pnsamp/gradcheck.hpp"
#include "pnsamp/layers.hpp"
#include "pnsamp/losses.hpp"
#include "pnsamp/net.hpp"
#include "pnsamp/optimizer.hpp"
#include "pnsamp/phantom.hpp"
#include "pnsamp/predict.hpp"
#include "pnsamp/tensor.hpp"
#include "pnsamp/train.hpp"
#include "pnsamp/volume_io.hpp"
#include "pnsamp/windowing.hpp"
