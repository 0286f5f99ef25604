#pragma once

#include <stdexcept>
#include <string>

namespace gbtsam {

// Invalid input supplied by the caller (bad config, malformed file, bad shape).
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

// Training diverged (non-finite loss). Carries a diagnostic message.
class TrainingAborted : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace gbtsam
