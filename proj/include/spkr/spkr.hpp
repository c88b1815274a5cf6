// spkr/spkr.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Umbrella header for the speaker-recognition toolkit.

#ifndef SPKR_SPKR_HPP_
#define SPKR_SPKR_HPP_

#include "spkr/common.hpp"
#include "spkr/textio.hpp"
#include "spkr/corpus.hpp"
#include "spkr/frontend.hpp"
#include "spkr/gmm.hpp"
#include "spkr/embedding.hpp"
#include "spkr/scoring.hpp"
#include "spkr/fusion.hpp"
#include "spkr/eval.hpp"
#include "spkr/experiment.hpp"

#endif  // SPKR_SPKR_HPP_
