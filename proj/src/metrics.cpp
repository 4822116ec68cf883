#include "crl/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace crl::metrics {

double success_rate(Actor& actor, const TaskEnvSpec& task, int n_episodes, std::uint64_t seed) {
    if (n_episodes < 1) throw std::invalid_argument("success_rate: n_episodes must be >= 1");
    envs::Env env(task.layout, task.transform, task.horizon, seed);
    int successes = 0;
    for (int i = 0; i < n_episodes; ++i) {
        auto s = env.reset();
        actor.reset();
        while (true) {
            const auto obs = env.observe(s);
            const auto a = actor.act(obs, s.goal, env.achieved(s), s.t);
            const auto res = env.step(s, a);
            s = res.state;
            if (res.done) {
                if (res.reward == 1.0) ++successes;
                break;
            }
        }
    }
    return static_cast<double>(successes) / n_episodes;
}

SuccessMatrix::SuccessMatrix(int n)
    : n_tasks(n),
      sigma(static_cast<std::size_t>(n) * n, std::numeric_limits<double>::quiet_NaN()),
      ref_sigma(n, std::numeric_limits<double>::quiet_NaN()) {}

double& SuccessMatrix::at(int j, int k) {
    return sigma[static_cast<std::size_t>(j) * n_tasks + k];
}

double SuccessMatrix::at(int j, int k) const {
    return sigma[static_cast<std::size_t>(j) * n_tasks + k];
}

CrlMetrics compute_metrics(const SuccessMatrix& m, double stored_params,
                           double single_policy_params) {
    const int n = m.n_tasks;
    if (n < 1) throw std::invalid_argument("compute_metrics: empty matrix");
    for (int j = 0; j < n; ++j)
        for (int k = 0; k <= j; ++k)
            if (std::isnan(m.at(j, k)))
                throw std::invalid_argument("compute_metrics: missing sigma entry");
    if (single_policy_params <= 0.0)
        throw std::invalid_argument("compute_metrics: bad parameter count");

    CrlMetrics out;
    bool have_refs = true;
    for (int k = 0; k < n; ++k) {
        out.per += m.at(n - 1, k);
        out.bwt += m.at(n - 1, k) - m.at(k, k);
        if (std::isnan(m.ref_sigma[static_cast<std::size_t>(k)]))
            have_refs = false;
        else
            out.fwt += m.at(k, k) - m.ref_sigma[static_cast<std::size_t>(k)];
    }
    out.per /= n;
    out.bwt /= n;
    out.fwt = have_refs ? out.fwt / n : std::numeric_limits<double>::quiet_NaN();
    out.mem = stored_params / single_policy_params;
    return out;
}

}  // namespace crl::metrics
