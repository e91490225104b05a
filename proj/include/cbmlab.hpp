// Copyright 2026 The cbmlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "cbmlab/calibration.hpp"
#include "cbmlab/datagen.hpp"
#include "cbmlab/dense_array.hpp"
#include "cbmlab/experiment.hpp"
#include "cbmlab/graph.hpp"
#include "cbmlab/interventions.hpp"
#include "cbmlab/io.hpp"
#include "cbmlab/metrics.hpp"
#include "cbmlab/models.hpp"
#include "cbmlab/plot.hpp"
#include "cbmlab/rng.hpp"
#include "cbmlab/training.hpp"
