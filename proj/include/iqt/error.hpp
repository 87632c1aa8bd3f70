/* Copyright 2026 The IQT Authors. All Rights Reserved.

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

#ifndef IQT_ERROR_HPP_
#define IQT_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace iqt {

// Base of every exception thrown by the library. The CLI maps ArgumentError
// to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IQT_DEFINE_ERROR(Name)              \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

IQT_DEFINE_ERROR(ArgumentError);
IQT_DEFINE_ERROR(FormatError);
IQT_DEFINE_ERROR(UnsupportedFormatError);
IQT_DEFINE_ERROR(IoError);
IQT_DEFINE_ERROR(ShapeError);
IQT_DEFINE_ERROR(EstimationError);
IQT_DEFINE_ERROR(DegenerateError);
IQT_DEFINE_ERROR(DistributionError);
IQT_DEFINE_ERROR(CapabilityError);
IQT_DEFINE_ERROR(SpecError);
IQT_DEFINE_ERROR(NumericError);

#undef IQT_DEFINE_ERROR

}  // namespace iqt

#endif  // IQT_ERROR_HPP_
