#pragma once

#include <stdexcept>
#include <string>

namespace unihand {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define UNIHAND_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

UNIHAND_DEFINE_ERROR(ShapeMismatch);
UNIHAND_DEFINE_ERROR(EmptyHandMask);
UNIHAND_DEFINE_ERROR(UnknownKind);
UNIHAND_DEFINE_ERROR(LengthNotMultiple);
UNIHAND_DEFINE_ERROR(OddDimension);
UNIHAND_DEFINE_ERROR(SplitMismatch);
UNIHAND_DEFINE_ERROR(StepOutOfRange);
UNIHAND_DEFINE_ERROR(DegenerateConfiguration);
UNIHAND_DEFINE_ERROR(SequenceTooShort);
UNIHAND_DEFINE_ERROR(HandLeavesFrustum);
UNIHAND_DEFINE_ERROR(MissingCheckpoint);
UNIHAND_DEFINE_ERROR(NonFiniteLoss);
UNIHAND_DEFINE_ERROR(FormatError);

#undef UNIHAND_DEFINE_ERROR

}  // namespace unihand
