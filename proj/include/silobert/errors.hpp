#pragma once

#include <stdexcept>
#include <string>

namespace silobert {

/// Shape or dimension disagreement between tensor operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Malformed serialized data (checkpoint, corpus line, label string).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Silo split cannot be performed (fewer units than silos).
struct SplitError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Parameter sets offered for aggregation are not congruent.
struct AggregationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss or gradient.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Index out of range (token id, label id).
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

}  // namespace silobert
