#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace v2pe {

// Every failure surfaced by the library derives from Error so callers (the CLI
// in particular) can catch one type and still report the specific kind.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A token stream violates its structural invariants (non-contiguous image run,
// gapped image ids, symbol outside the vocabulary, ...).
class StructureError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration (empty delta set, empty target span,
// malformed config file, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A delta assignment does not cover every image of the stream it is applied to.
class IncompleteAssignmentError : public Error {
 public:
  using Error::Error;
};

// Mismatched vector / tensor dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Index or count outside the valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// A requested sample length cannot host the needles plus the question.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Malformed or unreadable file (JSONL, checkpoint, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace v2pe
