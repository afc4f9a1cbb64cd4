#pragma once

#include <stdexcept>
#include <string>

namespace pmg {

// Base for every error raised by the library. Carries the process exit code
// the CLI maps it to.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, int exit_code = 1)
        : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

// Bad input files, bad config, violated preconditions on user data.
class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error(what, 2) {}
};

// Training loss blew up or went non-finite.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& what) : Error(what, 3) {}
};

// LLM / caption / generator backend failure. `subject` names the item,
// attribute or grid point being processed when the failure happened.
class BackendError : public Error {
public:
    BackendError(const std::string& what, bool retryable, std::string subject = {})
        : Error(subject.empty() ? what : what + " [" + subject + "]", 4),
          retryable_(retryable),
          subject_(std::move(subject)) {}

    bool retryable() const noexcept { return retryable_; }
    const std::string& subject() const noexcept { return subject_; }

private:
    bool retryable_;
    std::string subject_;
};

}  // namespace pmg
