#pragma once

#include <stdexcept>
#include <string>

namespace relevis {

/// Root of every error thrown by the library. `kind()` is a stable short tag
/// used in CLI diagnostics and the service's `{error, detail}` bodies.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string &detail)
        : std::runtime_error(kind + ": " + detail), kind_(std::move(kind)), detail_(detail) {}

    const std::string &kind() const noexcept { return kind_; }
    const std::string &detail() const noexcept { return detail_; }

private:
    std::string kind_;
    std::string detail_;
};

#define RELEVIS_DEFINE_ERROR(Name)                                                  \
    class Name : public Error {                                                     \
    public:                                                                         \
        explicit Name(const std::string &detail) : Error(#Name, detail) {}          \
    }

RELEVIS_DEFINE_ERROR(FormatError);
RELEVIS_DEFINE_ERROR(UnsupportedError);
RELEVIS_DEFINE_ERROR(IoError);
RELEVIS_DEFINE_ERROR(RejectedError);
RELEVIS_DEFINE_ERROR(AtlasError);
RELEVIS_DEFINE_ERROR(DimsError);
RELEVIS_DEFINE_ERROR(ShapeError);
RELEVIS_DEFINE_ERROR(NumericError);
RELEVIS_DEFINE_ERROR(SingularDesignError);
RELEVIS_DEFINE_ERROR(DegenerateClassError);
RELEVIS_DEFINE_ERROR(DegenerateLabelsError);
RELEVIS_DEFINE_ERROR(DegenerateInputError);
RELEVIS_DEFINE_ERROR(DegenerateRelevanceError);
RELEVIS_DEFINE_ERROR(DataError);
RELEVIS_DEFINE_ERROR(ConfigError);

#undef RELEVIS_DEFINE_ERROR

} // namespace relevis
