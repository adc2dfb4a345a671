#pragma once

#include <stdexcept>
#include <string>

namespace cta {

// Exit-code carrying errors used by the command layer.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::string& what)
      : std::runtime_error("missing artifact: " + what) {}
};

class TrainingFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cta
