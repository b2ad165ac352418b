// SPDX-License-Identifier: Apache-2.0
// Independent oracles used by the test suites. Everything here is computed
// from first principles (finite differences, streaming statistics, brute
// force enumeration) and must stay decoupled from the library code paths it
// checks.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

namespace oracle {

// Central finite-difference gradient of a scalar function, step h.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Relative error with a unit floor, so tiny gradients compare absolutely.
inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i]));
    return m;
}

// Streaming (Welford) mean/std oracle, population convention.
struct Welford {
    std::size_t n{0};
    double mean{0.0};
    double m2{0.0};
    void add(double x) {
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    double std_pop() const { return n > 0 ? std::sqrt(m2 / static_cast<double>(n)) : 0.0; }
};

// O(n^2) Pareto dominance oracle over (C, L) points. A point survives iff no
// other point beats it (lower-or-equal C with strictly lower L, or strictly
// lower C with lower-or-equal L); exact duplicates collapse to one.
inline std::vector<std::pair<double, double>> pareto_brute_force(std::vector<std::pair<double, double>> pts) {
    std::vector<std::pair<double, double>> out;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        bool keep = true;
        for (std::size_t j = 0; j < pts.size() && keep; ++j) {
            if (j == i) continue;
            const bool beats = (pts[j].first <= pts[i].first && pts[j].second < pts[i].second) ||
                               (pts[j].first < pts[i].first && pts[j].second <= pts[i].second);
            if (beats) keep = false;
            if (pts[j] == pts[i] && j < i) keep = false; // duplicate: keep first only
        }
        if (keep) out.push_back(pts[i]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace oracle
