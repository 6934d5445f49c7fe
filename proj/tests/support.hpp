#ifndef AAI_TESTS_SUPPORT_HPP
#define AAI_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "aai/params.hpp"
#include "aai/tensor.hpp"

namespace aai::test {

struct GradCheck {
    double max_rel_error = 0.0;
    int probes = 0;
};

// Compares analytic[i] against central differences of f at `probes` random
// coordinates of x. The error at a coordinate is |a-n| / max(|a|, |n|, floor).
inline GradCheck check_gradient(Tensor x, const Tensor& analytic, const std::function<double(const Tensor&)>& f,
                                int probes, std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
    Rng rng(seed);
    GradCheck out;
    for (int p = 0; p < probes; ++p) {
        const std::size_t i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(x.size())));
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
        ++out.probes;
    }
    return out;
}

inline double row_sum(const Tensor& m, int i) {
    double s = 0.0;
    for (int j = 0; j < m.dim(1); ++j) {
        s += m.at(i, j);
    }
    return s;
}

inline Tensor random_unit_rows(int n, int d, Rng& rng) {
    Tensor t = rng.normal_tensor({n, d});
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            s += t.at(i, j) * t.at(i, j);
        }
        for (int j = 0; j < d; ++j) {
            t.at(i, j) /= std::sqrt(s);
        }
    }
    return t;
}

}  // namespace aai::test

#endif  // AAI_TESTS_SUPPORT_HPP
