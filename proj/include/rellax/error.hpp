// Copyright 2026 The rellax Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace rellax {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shape mismatch, bad index, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input files could not be decoded or parsed.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Optimization went wrong: non-finite loss or gradient, frozen weights touched.
class TrainingError : public Error {
 public:
  using Error::Error;
};

#define RELLAX_REQUIRE(cond, msg)                                   \
  do {                                                              \
    if (!(cond)) throw ::rellax::ContractError(std::string(msg));   \
  } while (0)

}  // namespace rellax
