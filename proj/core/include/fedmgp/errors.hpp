#pragma once

#include <stdexcept>
#include <string>

namespace fedmgp {

struct ShapeMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AxisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LabelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonScalarLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingGradientError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FrozenParameterError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Cosine distance against an all-zero key is undefined.
struct DegenerateKeyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised by local-prompt queries on an empty pool; callers fall back to the
// global-only inference path.
struct NoLocalKnowledgeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fedmgp
