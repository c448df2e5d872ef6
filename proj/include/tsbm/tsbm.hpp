// Copyright 2026 The tsbm Authors
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

#include "tsbm/bands.hpp"
#include "tsbm/bench.hpp"
#include "tsbm/dualnet.hpp"
#include "tsbm/evaluation.hpp"
#include "tsbm/fft.hpp"
#include "tsbm/io.hpp"
#include "tsbm/layers.hpp"
#include "tsbm/model.hpp"
#include "tsbm/spectral.hpp"
#include "tsbm/ssd.hpp"
#include "tsbm/tensor.hpp"
#include "tsbm/training.hpp"
#include "tsbm/verify.hpp"
#include "tsbm/wav.hpp"
