// SPDX-License-Identifier: Apache-2.0
// Umbrella header for the core library. Video decoding and rendering live in
// echonet.hpp and explain.hpp, which additionally need OpenCV.
#pragma once

#include "protoef/archive.hpp"
#include "protoef/data.hpp"
#include "protoef/dataset_io.hpp"
#include "protoef/feature_extractor.hpp"
#include "protoef/losses.hpp"
#include "protoef/metrics.hpp"
#include "protoef/model.hpp"
#include "protoef/nn.hpp"
#include "protoef/optim.hpp"
#include "protoef/pca.hpp"
#include "protoef/prototype.hpp"
#include "protoef/random.hpp"
#include "protoef/trainer.hpp"
#include "protoef/volume.hpp"
