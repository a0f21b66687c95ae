#pragma once

#include <stdexcept>
#include <string>

namespace gmfpca {

// Base class for all library errors. Subclasses map to the failure modes
// surfaced through the public API; the CLI translates them to exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class GridTooSmall : public Error {
public:
    explicit GridTooSmall(const std::string& msg) : Error(msg) {}
};

class InvalidBinWidth : public Error {
public:
    explicit InvalidBinWidth(const std::string& msg) : Error(msg) {}
};

class DegenerateBin : public Error {
public:
    explicit DegenerateBin(const std::string& msg) : Error(msg) {}
};

class ConvergenceFailure : public Error {
public:
    explicit ConvergenceFailure(const std::string& msg) : Error(msg) {}
};

class PipelineFailure : public Error {
public:
    explicit PipelineFailure(const std::string& msg) : Error(msg) {}
};

class Level2Inestimable : public Error {
public:
    explicit Level2Inestimable(const std::string& msg) : Error(msg) {}
};

class InvalidCovariance : public Error {
public:
    explicit InvalidCovariance(const std::string& msg) : Error(msg) {}
};

class GridMismatch : public Error {
public:
    explicit GridMismatch(const std::string& msg) : Error(msg) {}
};

class InvalidDownsample : public Error {
public:
    explicit InvalidDownsample(const std::string& msg) : Error(msg) {}
};

class NoRunFound : public Error {
public:
    explicit NoRunFound(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

} // namespace gmfpca
