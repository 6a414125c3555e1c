#pragma once

#include <stdexcept>
#include <string>

namespace robust_pose {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Keypoint set whose centered matrix has rank < 2; rotation is not unique.
class DegenerateConfiguration : public Error {
 public:
  using Error::Error;
};

class NonFiniteObjective : public Error {
 public:
  using Error::Error;
};

/// No projected point lands inside the image.
class EmptyProjection : public Error {
 public:
  using Error::Error;
};

class EmptyDetectedMask : public Error {
 public:
  using Error::Error;
};

class EmptyMask : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace robust_pose
