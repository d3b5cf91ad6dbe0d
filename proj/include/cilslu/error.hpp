// Copyright 2026 The cilslu Authors
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

#include <stdexcept>
#include <string>
#include <string_view>

namespace cilslu {

enum class ErrorKind {
  dimension,
  numeric,
  config,
  input,
  usage,
  integrity,
  spec,
  undefined,
  io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::config: return "config";
    case ErrorKind::input: return "input";
    case ErrorKind::usage: return "usage";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::spec: return "spec";
    case ErrorKind::undefined: return "undefined";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Process exit status for a failure category (0 is success, 1 is reserved
/// for uncategorized failures).
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::config: return 3;
    case ErrorKind::input: return 4;
    case ErrorKind::spec: return 5;
    case ErrorKind::integrity: return 6;
    case ErrorKind::io: return 7;
    case ErrorKind::numeric: return 8;
    case ErrorKind::dimension: return 9;
    case ErrorKind::undefined: return 10;
  }
  return 1;
}

/// Exception carrying a failure category. The CLI maps categories to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace cilslu
