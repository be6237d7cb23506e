#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lol {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Labels are stored as +1 / -1.
enum class Label : int { Neg = -1, Pos = 1 };

inline double sign_of(Label y) { return static_cast<double>(static_cast<int>(y)); }

inline Label label_from_int(int v) {
    if (v == 1) return Label::Pos;
    if (v == -1) return Label::Neg;
    throw std::invalid_argument("label must be +1 or -1, got " + std::to_string(v));
}

// Thrown when a caller violates a documented precondition.
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace lol
