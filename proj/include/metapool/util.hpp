#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <mutex>
#include <string>
#include <string_view>
#include <system_error>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "metapool/errors.hpp"

namespace metapool {

inline double mean_of(const Eigen::VectorXd& v) { return v.mean(); }

// Sample variance, divisor n-1.
inline double variance_of(const Eigen::VectorXd& v) {
    const auto n = v.size();
    if (n < 2) return 0.0;
    const double m = v.mean();
    return (v.array() - m).square().sum() / static_cast<double>(n - 1);
}

inline double sd_of(const Eigen::VectorXd& v) { return std::sqrt(variance_of(v)); }

// Linear-interpolation quantile (R type 7) on a copy of the input.
inline double quantile_of(Eigen::VectorXd v, double q) {
    const auto n = v.size();
    if (n == 0) throw ValidationError(Errc::insufficient_draws, "quantile of empty vector");
    std::sort(v.data(), v.data() + n);
    if (q <= 0.0) return v[0];
    if (q >= 1.0) return v[n - 1];
    const double h = q * static_cast<double>(n - 1);
    const auto lo = static_cast<Eigen::Index>(std::floor(h));
    const double frac = h - static_cast<double>(lo);
    if (lo + 1 >= n) return v[n - 1];
    return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

inline double log_add_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double hi = std::max(a, b);
    return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Shortest round-trip decimal representation; deterministic across runs,
// reconstructs the exact double on load.
inline std::string format_double(double value) {
    char buffer[64];
    const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, result.ptr);
}

inline double parse_double(std::string_view text, bool& ok) {
    double value = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    const auto result = std::from_chars(first, last, value);
    ok = result.ec == std::errc() && result.ptr == last;
    return value;
}

// Runs fn(0..n-1) on up to `threads` workers. Work items must be independent;
// result slots should be preallocated so aggregation order is fixed. The first
// exception thrown by a worker is rethrown after all workers join.
inline void parallel_for(std::size_t n, unsigned threads,
                         const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned workers = std::min<std::size_t>(std::min(threads == 0 ? hw : threads, hw), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace metapool
