#pragma once

// Umbrella header. image_io.hpp is separate because it pulls in OpenCV.

#include "sgan/attention.hpp"
#include "sgan/boxes.hpp"
#include "sgan/data.hpp"
#include "sgan/detector.hpp"
#include "sgan/detector_training.hpp"
#include "sgan/discriminators.hpp"
#include "sgan/evaluation.hpp"
#include "sgan/generators.hpp"
#include "sgan/inference.hpp"
#include "sgan/losses.hpp"
#include "sgan/metrics.hpp"
#include "sgan/reports.hpp"
#include "sgan/trainer.hpp"
