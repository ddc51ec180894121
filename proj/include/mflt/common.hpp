#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <string>

namespace mflt {

using Cloud = Eigen::MatrixXd;    // one point per row
using Vector = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Thrown for invalid configuration or invalid constructed objects.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown for malformed input files / malformed numeric inputs.
struct input_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when the optimizer produces non-finite state.
struct diverged_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown by evaluation routines on mismatched inputs.
struct eval_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Logging. Level comes from MFLT_LOG (off|error|warn|info|debug), overridable
// programmatically (the CLI exposes --log-level).
// ---------------------------------------------------------------------------

enum class LogLevel { Off = 0, Error = 1, Warn = 2, Info = 3, Debug = 4 };

namespace detail {
inline LogLevel level_from_string(const std::string& s) {
    if (s == "off") return LogLevel::Off;
    if (s == "error") return LogLevel::Error;
    if (s == "warn") return LogLevel::Warn;
    if (s == "info") return LogLevel::Info;
    if (s == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
}

inline LogLevel& log_level_ref() {
    static LogLevel level = [] {
        const char* env = std::getenv("MFLT_LOG");
        return env ? level_from_string(env) : LogLevel::Warn;
    }();
    return level;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_level_ref() = level; }
inline void set_log_level(const std::string& s) { detail::log_level_ref() = detail::level_from_string(s); }
inline LogLevel log_level() { return detail::log_level_ref(); }

template <typename... Args>
void log_at(LogLevel level, const char* tag, const char* fmt, Args... args) {
    if (static_cast<int>(level) > static_cast<int>(detail::log_level_ref())) return;
    std::fprintf(stderr, "[mflt %s] ", tag);
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

template <typename... Args>
void log_error(const char* fmt, Args... args) { log_at(LogLevel::Error, "error", fmt, args...); }
template <typename... Args>
void log_warn(const char* fmt, Args... args) { log_at(LogLevel::Warn, "warn", fmt, args...); }
template <typename... Args>
void log_info(const char* fmt, Args... args) { log_at(LogLevel::Info, "info", fmt, args...); }
template <typename... Args>
void log_debug(const char* fmt, Args... args) { log_at(LogLevel::Debug, "debug", fmt, args...); }

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

// log(sum_i exp(x_i)) with max-shift stabilization; -inf entries contribute 0.
inline double log_sum_exp(const Eigen::Ref<const Vector>& x) {
    const double c = x.maxCoeff();
    if (!std::isfinite(c)) return c;  // all -inf (or a +inf/nan slipped in)
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) s += std::exp(x[i] - c);
    return c + std::log(s);
}

inline bool all_finite(const Eigen::Ref<const Cloud>& m) { return m.allFinite(); }

inline bool nearly_equal(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace mflt
