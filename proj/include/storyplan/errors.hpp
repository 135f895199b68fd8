/* Copyright 2026 The Storyplan Authors

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <stdexcept>
#include <string>

namespace storyplan {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A required external capability (model endpoint, metric package) is
/// not configured or not installed.
struct CapabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AnnotationError : std::runtime_error {
  AnnotationError(const std::string& stage, const std::string& msg)
      : std::runtime_error("[" + stage + "] " + msg), stage(stage) {}
  std::string stage;
};

struct FeatureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace storyplan
