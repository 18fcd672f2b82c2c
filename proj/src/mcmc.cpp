#include "metapool/mcmc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metapool/errors.hpp"
#include "metapool/util.hpp"

namespace metapool {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// Energy error beyond which a trajectory is declared divergent.
constexpr double kDivergenceThreshold = 1000.0;

struct PhasePoint {
    Eigen::VectorXd q;
    Eigen::VectorXd grad;
    double logp = -kInf;
};

// Welford accumulator for the diagonal metric.
class RunningVariance {
  public:
    void reset(int dim) {
        count_ = 0;
        mean_ = Eigen::VectorXd::Zero(dim);
        m2_ = Eigen::VectorXd::Zero(dim);
    }
    void add(const Eigen::VectorXd& x) {
        ++count_;
        const Eigen::VectorXd delta = x - mean_;
        mean_ += delta / static_cast<double>(count_);
        m2_ += delta.cwiseProduct(x - mean_);
    }
    long count() const { return count_; }
    Eigen::VectorXd variance() const {
        if (count_ < 2) return Eigen::VectorXd::Ones(mean_.size());
        return m2_ / static_cast<double>(count_ - 1);
    }

  private:
    long count_ = 0;
    Eigen::VectorXd mean_;
    Eigen::VectorXd m2_;
};

// Dual averaging of log step size (Hoffman & Gelman 2014, Algorithm 5 constants).
class DualAveraging {
  public:
    void restart(double initial_step, double target) {
        mu_ = std::log(10.0 * initial_step);
        target_ = target;
        h_bar_ = 0.0;
        log_eps_bar_ = 0.0;
        count_ = 0;
        log_eps_ = std::log(initial_step);
    }
    double update(double accept_stat) {
        ++count_;
        const double m = static_cast<double>(count_);
        const double eta = 1.0 / (m + kT0);
        h_bar_ = (1.0 - eta) * h_bar_ + eta * (target_ - accept_stat);
        log_eps_ = mu_ - std::sqrt(m) / kGamma * h_bar_;
        const double weight = std::pow(m, -kKappa);
        log_eps_bar_ = weight * log_eps_ + (1.0 - weight) * log_eps_bar_;
        return std::exp(log_eps_);
    }
    double current() const { return std::exp(log_eps_); }
    double averaged() const { return std::exp(log_eps_bar_); }

  private:
    static constexpr double kGamma = 0.05;
    static constexpr double kT0 = 10.0;
    static constexpr double kKappa = 0.75;
    double mu_ = 0.0, target_ = 0.8, h_bar_ = 0.0, log_eps_bar_ = 0.0, log_eps_ = 0.0;
    long count_ = 0;
};

// Warmup schedule: fast buffers for step size only, expanding slow windows
// for the metric (75/25/50 pattern, scaled down for short warmups).
struct AdaptationSchedule {
    int init_buffer = 0;
    int term_start = 0;  // first iteration of the terminal buffer
    std::vector<int> window_ends;  // iteration indices (exclusive) closing each slow window

    static AdaptationSchedule build(int warmup) {
        AdaptationSchedule s;
        if (warmup < 20) {
            s.init_buffer = warmup;
            s.term_start = warmup;
            return s;
        }
        int init = 75, term = 50, base = 25;
        if (init + term + base > warmup) {
            init = std::max(1, static_cast<int>(0.15 * warmup));
            term = std::max(1, static_cast<int>(0.10 * warmup));
            base = warmup - init - term;
        }
        s.init_buffer = init;
        s.term_start = warmup - term;
        int window = base;
        int pos = init;
        while (pos < s.term_start) {
            int end = pos + window;
            // widen the last window to absorb the remainder
            if (end + 2 * window > s.term_start) end = s.term_start;
            s.window_ends.push_back(std::min(end, s.term_start));
            pos = end;
            window *= 2;
        }
        return s;
    }

    bool in_slow_window(int iter) const {
        return iter >= init_buffer && iter < term_start && !window_ends.empty();
    }
    bool closes_window(int iter) const {
        return std::find(window_ends.begin(), window_ends.end(), iter + 1) != window_ends.end();
    }
};

class NutsChain {
  public:
    NutsChain(const LogDensityModel& model, const FitConfig& config, int chain_index)
        : model_(model),
          config_(config),
          rng_(Rng::substream(config.seed, {hash_str("chain"), static_cast<std::uint64_t>(chain_index)})),
          dim_(model.dim()),
          inv_metric_(Eigen::VectorXd::Ones(model.dim())) {}

    struct Result {
        Eigen::MatrixXd constrained;  // retained x reported-dim
        int divergences = 0;
        double accept_rate = 0.0;
    };

    Result run() {
        initialize();
        step_size_ = find_reasonable_step_size();
        averaging_.restart(step_size_, config_.target_accept);
        const auto schedule = AdaptationSchedule::build(config_.warmup);
        variance_.reset(dim_);

        const int retained = config_.retained_per_chain();
        Result result;
        result.constrained.resize(retained, model_.constrain(state_.q).size());
        int row = 0;
        double accept_sum = 0.0;
        int accept_count = 0;

        for (int iter = 0; iter < config_.iterations; ++iter) {
            const bool warming = iter < config_.warmup;
            const auto transition = next_sample();
            if (warming) {
                step_size_ = averaging_.update(transition.accept_stat);
                if (schedule.in_slow_window(iter)) {
                    variance_.add(state_.q);
                    if (schedule.closes_window(iter)) {
                        update_metric();
                        step_size_ = find_reasonable_step_size();
                        averaging_.restart(step_size_, config_.target_accept);
                    }
                }
                if (iter + 1 == config_.warmup) step_size_ = averaging_.averaged();
            } else {
                if (transition.divergent) ++result.divergences;
                accept_sum += transition.accept_stat;
                ++accept_count;
                const int offset = iter + 1 - config_.warmup;
                if (offset % config_.thin == 0 && row < retained)
                    result.constrained.row(row++) = model_.constrain(state_.q);
            }
        }
        result.accept_rate = accept_count > 0 ? accept_sum / accept_count : kNaN;
        if (row != retained) throw InternalError("retained draw count mismatch");
        return result;
    }

  private:
    struct Transition {
        double accept_stat = 0.0;
        bool divergent = false;
    };

    struct Subtree {
        Eigen::VectorXd q_minus, p_minus, grad_minus;
        Eigen::VectorXd q_plus, p_plus, grad_plus;
        Eigen::VectorXd q_prop, grad_prop;
        double logp_prop = -kInf;
        double log_weight = -kInf;  // log sum exp(H0 - H) over leaves
        double sum_accept = 0.0;
        int n_leaves = 0;
        bool turning = false;
        bool divergent = false;
    };

    void initialize() {
        state_.q.resize(dim_);
        state_.grad.resize(dim_);
        for (int attempt = 0; attempt < 100; ++attempt) {
            for (int i = 0; i < dim_; ++i) state_.q[i] = rng_.uniform(-2.0, 2.0);
            state_.logp = model_.logpdf_grad(state_.q, state_.grad);
            if (std::isfinite(state_.logp) && state_.grad.allFinite()) return;
        }
        throw SamplerError(Errc::initialization_failure,
                           "no finite starting point in 100 attempts");
    }

    double kinetic(const Eigen::VectorXd& p) const {
        return 0.5 * p.cwiseProduct(p).dot(inv_metric_);
    }

    void leapfrog_step(Eigen::VectorXd& q, Eigen::VectorXd& p, Eigen::VectorXd& grad,
                       double& logp, double eps) const {
        p += 0.5 * eps * grad;
        q += eps * inv_metric_.cwiseProduct(p);
        logp = model_.logpdf_grad(q, grad);
        p += 0.5 * eps * grad;
    }

    double find_reasonable_step_size() {
        double eps = 1.0;
        Eigen::VectorXd p(dim_);
        for (int i = 0; i < dim_; ++i) p[i] = rng_.normal() / std::sqrt(inv_metric_[i]);
        const double h0 = -state_.logp + kinetic(p);

        auto energy_after_step = [&](double step) {
            Eigen::VectorXd q = state_.q, momentum = p, grad = state_.grad;
            double logp = state_.logp;
            leapfrog_step(q, momentum, grad, logp, step);
            if (!std::isfinite(logp)) return kInf;
            return -logp + kinetic(momentum);
        };

        double h1 = energy_after_step(eps);
        const double direction = (h0 - h1) > std::log(0.5) ? 1.0 : -1.0;
        for (int i = 0; i < 100; ++i) {
            if (direction * (h0 - h1) <= -direction * std::numbers::ln2) break;
            eps *= direction > 0 ? 2.0 : 0.5;
            if (eps > 1e7 || eps < 1e-10) break;
            h1 = energy_after_step(eps);
        }
        return std::clamp(eps, 1e-10, 1e7);
    }

    void update_metric() {
        if (variance_.count() < 3) return;
        const double n = static_cast<double>(variance_.count());
        // Regularize toward a small diagonal, as in windowed warmup practice.
        inv_metric_ = (n / (n + 5.0)) * variance_.variance().array() + 1e-3 * (5.0 / (n + 5.0));
        variance_.reset(dim_);
    }

    bool is_turning(const Eigen::VectorXd& q_minus, const Eigen::VectorXd& p_minus,
                    const Eigen::VectorXd& q_plus, const Eigen::VectorXd& p_plus) const {
        const Eigen::VectorXd span = q_plus - q_minus;
        return span.dot(inv_metric_.cwiseProduct(p_minus)) < 0.0 ||
               span.dot(inv_metric_.cwiseProduct(p_plus)) < 0.0;
    }

    Subtree build_leaf(const Eigen::VectorXd& q_edge, const Eigen::VectorXd& p_edge,
                       const Eigen::VectorXd& grad_edge, double direction, double h0) {
        Subtree leaf;
        Eigen::VectorXd q = q_edge, p = p_edge, grad = grad_edge;
        double logp = -kInf;
        leapfrog_step(q, p, grad, logp, direction * step_size_);
        const double h = std::isfinite(logp) ? -logp + kinetic(p) : kInf;
        const double delta = h - h0;
        leaf.n_leaves = 1;
        leaf.sum_accept = std::isfinite(delta) ? std::min(1.0, std::exp(-delta)) : 0.0;
        leaf.divergent = !std::isfinite(delta) || delta > kDivergenceThreshold;
        leaf.log_weight = leaf.divergent ? -kInf : -delta;
        leaf.q_minus = leaf.q_plus = q;
        leaf.p_minus = leaf.p_plus = p;
        leaf.grad_minus = leaf.grad_plus = grad;
        leaf.q_prop = std::move(q);
        leaf.grad_prop = std::move(grad);
        leaf.logp_prop = logp;
        return leaf;
    }

    Subtree build_tree(int depth, double direction, const Eigen::VectorXd& q_edge,
                       const Eigen::VectorXd& p_edge, const Eigen::VectorXd& grad_edge,
                       double h0) {
        if (depth == 0) return build_leaf(q_edge, p_edge, grad_edge, direction, h0);

        Subtree first = build_tree(depth - 1, direction, q_edge, p_edge, grad_edge, h0);
        if (first.turning || first.divergent) return first;

        const Eigen::VectorXd& q_next = direction > 0 ? first.q_plus : first.q_minus;
        const Eigen::VectorXd& p_next = direction > 0 ? first.p_plus : first.p_minus;
        const Eigen::VectorXd& grad_next = direction > 0 ? first.grad_plus : first.grad_minus;
        Subtree second = build_tree(depth - 1, direction, q_next, p_next, grad_next, h0);

        Subtree merged;
        merged.n_leaves = first.n_leaves + second.n_leaves;
        merged.sum_accept = first.sum_accept + second.sum_accept;
        merged.divergent = second.divergent;
        merged.turning = second.turning;
        if (direction > 0) {
            merged.q_minus = std::move(first.q_minus);
            merged.p_minus = std::move(first.p_minus);
            merged.grad_minus = std::move(first.grad_minus);
            merged.q_plus = std::move(second.q_plus);
            merged.p_plus = std::move(second.p_plus);
            merged.grad_plus = std::move(second.grad_plus);
        } else {
            merged.q_minus = std::move(second.q_minus);
            merged.p_minus = std::move(second.p_minus);
            merged.grad_minus = std::move(second.grad_minus);
            merged.q_plus = std::move(first.q_plus);
            merged.p_plus = std::move(first.p_plus);
            merged.grad_plus = std::move(first.grad_plus);
        }
        if (merged.divergent || merged.turning) {
            // discarded by the caller; proposal fields do not matter
            merged.log_weight = first.log_weight;
            merged.q_prop = std::move(first.q_prop);
            merged.grad_prop = std::move(first.grad_prop);
            merged.logp_prop = first.logp_prop;
            return merged;
        }
        merged.log_weight = log_add_exp(first.log_weight, second.log_weight);
        const double take_second = std::exp(second.log_weight - merged.log_weight);
        if (rng_.uniform() < take_second) {
            merged.q_prop = std::move(second.q_prop);
            merged.grad_prop = std::move(second.grad_prop);
            merged.logp_prop = second.logp_prop;
        } else {
            merged.q_prop = std::move(first.q_prop);
            merged.grad_prop = std::move(first.grad_prop);
            merged.logp_prop = first.logp_prop;
        }
        merged.turning = is_turning(merged.q_minus, merged.p_minus, merged.q_plus, merged.p_plus);
        return merged;
    }

    Transition next_sample() {
        Eigen::VectorXd p(dim_);
        for (int i = 0; i < dim_; ++i) p[i] = rng_.normal() / std::sqrt(inv_metric_[i]);
        const double h0 = -state_.logp + kinetic(p);

        Eigen::VectorXd q_minus = state_.q, q_plus = state_.q;
        Eigen::VectorXd p_minus = p, p_plus = p;
        Eigen::VectorXd grad_minus = state_.grad, grad_plus = state_.grad;
        Eigen::VectorXd q_prop = state_.q, grad_prop = state_.grad;
        double logp_prop = state_.logp;
        double log_weight = 0.0;  // initial state: exp(-(h0 - h0)) = 1
        double sum_accept = 0.0;
        int n_leaves = 0;

        Transition transition;
        for (int depth = 0; depth < config_.max_tree_depth; ++depth) {
            const double direction = rng_.bernoulli(0.5) ? 1.0 : -1.0;
            Subtree subtree =
                direction > 0 ? build_tree(depth, direction, q_plus, p_plus, grad_plus, h0)
                              : build_tree(depth, direction, q_minus, p_minus, grad_minus, h0);
            sum_accept += subtree.sum_accept;
            n_leaves += subtree.n_leaves;
            if (subtree.divergent) {
                transition.divergent = true;
                break;
            }
            if (subtree.turning) break;

            // Biased progressive sampling: favor the fresh subtree.
            if (std::log(rng_.uniform()) < subtree.log_weight - log_weight) {
                q_prop = subtree.q_prop;
                grad_prop = subtree.grad_prop;
                logp_prop = subtree.logp_prop;
            }
            log_weight = log_add_exp(log_weight, subtree.log_weight);
            if (direction > 0) {
                q_plus = std::move(subtree.q_plus);
                p_plus = std::move(subtree.p_plus);
                grad_plus = std::move(subtree.grad_plus);
            } else {
                q_minus = std::move(subtree.q_minus);
                p_minus = std::move(subtree.p_minus);
                grad_minus = std::move(subtree.grad_minus);
            }
            if (is_turning(q_minus, p_minus, q_plus, p_plus)) break;
        }

        state_.q = std::move(q_prop);
        state_.grad = std::move(grad_prop);
        state_.logp = logp_prop;
        transition.accept_stat = n_leaves > 0 ? sum_accept / n_leaves : 0.0;
        return transition;
    }

    const LogDensityModel& model_;
    const FitConfig& config_;
    Rng rng_;
    int dim_;
    Eigen::VectorXd inv_metric_;
    double step_size_ = 1.0;
    DualAveraging averaging_;
    RunningVariance variance_;
    PhasePoint state_;
};

class FunctionModel : public LogDensityModel {
  public:
    FunctionModel(LogDensityGradFn fn, int dim) : fn_(std::move(fn)), dim_(dim) {}
    int dim() const override { return dim_; }
    double logpdf_grad(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const override {
        return fn_(z, grad);
    }

  private:
    LogDensityGradFn fn_;
    int dim_;
};

}  // namespace

void FitConfig::validate() const {
    if (chains < 1) throw ValidationError(Errc::invalid_config, "chains must be >= 1");
    if (iterations <= 0) throw ValidationError(Errc::invalid_config, "iterations must be positive");
    if (warmup < 0 || warmup >= iterations)
        throw ValidationError(Errc::invalid_config, "warmup must satisfy 0 <= warmup < iterations");
    if (thin < 1) throw ValidationError(Errc::invalid_config, "thin must be >= 1");
    if (retained_per_chain() < 30)
        throw ValidationError(Errc::invalid_config,
                              "config retains " + std::to_string(retained_per_chain()) +
                                  " draws per chain; need at least 30");
    if (!(target_accept > 0.0 && target_accept < 1.0))
        throw ValidationError(Errc::invalid_config, "target_accept must lie in (0, 1)");
    if (max_tree_depth < 1)
        throw ValidationError(Errc::invalid_config, "max_tree_depth must be >= 1");
}

FitConfig FitConfig::fast_profile() {
    FitConfig config;
    config.chains = 2;
    config.iterations = 1500;
    config.warmup = 500;
    config.thin = 1;
    return config;
}

std::vector<std::string> LogDensityModel::parameter_names() const {
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(dim()));
    for (int i = 0; i < dim(); ++i) names.push_back("z_" + std::to_string(i + 1));
    return names;
}

int PosteriorDraws::total_divergences() const {
    int total = 0;
    for (int d : divergences) total += d;
    return total;
}

int PosteriorDraws::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < parameter_names.size(); ++i)
        if (parameter_names[i] == name) return static_cast<int>(i);
    throw ValidationError(Errc::missing_parameter, name);
}

Eigen::VectorXd PosteriorDraws::merged(int param_index) const {
    if (param_index < 0 || param_index >= dim())
        throw ValidationError(Errc::missing_parameter,
                              "parameter index " + std::to_string(param_index));
    Eigen::VectorXd out(total_draws());
    Eigen::Index row = 0;
    for (const auto& chain : chains) {
        out.segment(row, chain.rows()) = chain.col(param_index);
        row += chain.rows();
    }
    return out;
}

Eigen::VectorXd PosteriorDraws::merged(const std::string& name) const {
    return merged(index_of(name));
}

double PosteriorDraws::mean(const std::string& name) const { return merged(name).mean(); }
double PosteriorDraws::sd(const std::string& name) const { return sd_of(merged(name)); }
double PosteriorDraws::quantile(const std::string& name, double q) const {
    return quantile_of(merged(name), q);
}

void PosteriorDraws::compute_diagnostics() {
    rhat.assign(parameter_names.size(), kNaN);
    ess.assign(parameter_names.size(), kNaN);
    for (int j = 0; j < dim(); ++j) {
        std::vector<Eigen::VectorXd> per_chain;
        per_chain.reserve(chains.size());
        for (const auto& chain : chains) per_chain.push_back(chain.col(j));
        if (n_chains() >= 2 && n_retained() >= 4)
            rhat[static_cast<std::size_t>(j)] = metapool::rhat(per_chain);
        if (total_draws() >= 8) ess[static_cast<std::size_t>(j)] = metapool::ess(per_chain);
    }
}

bool PosteriorDraws::not_converged(double rhat_threshold) const {
    for (double r : rhat)
        if (std::isfinite(r) && r > rhat_threshold) return true;
    return false;
}

double rhat(const std::vector<Eigen::VectorXd>& chain_draws) {
    if (chain_draws.size() < 2)
        throw ValidationError(Errc::insufficient_draws, "rhat needs >= 2 chains");
    Eigen::Index min_len = chain_draws.front().size();
    for (const auto& c : chain_draws) min_len = std::min(min_len, c.size());
    if (min_len < 4)
        throw ValidationError(Errc::insufficient_draws, "rhat needs >= 4 draws per chain");

    const Eigen::Index half = min_len / 2;
    std::vector<Eigen::VectorXd> splits;
    for (const auto& c : chain_draws) {
        splits.push_back(c.head(half));
        splits.push_back(c.segment(min_len - half, half));
    }
    const auto n_splits = static_cast<double>(splits.size());
    const double m = static_cast<double>(half);

    double within = 0.0;
    Eigen::VectorXd means(splits.size());
    for (std::size_t i = 0; i < splits.size(); ++i) {
        means[static_cast<Eigen::Index>(i)] = splits[i].mean();
        within += variance_of(splits[i]);
    }
    within /= n_splits;
    const double between = m * variance_of(means);
    if (within <= 0.0) return between > 0.0 ? kInf : kNaN;
    const double var_plus = (m - 1.0) / m * within + between / m;
    return std::sqrt(var_plus / within);
}

double ess(const std::vector<Eigen::VectorXd>& chain_draws) {
    if (chain_draws.empty()) throw ValidationError(Errc::insufficient_draws, "ess of no chains");
    Eigen::Index min_len = chain_draws.front().size();
    for (const auto& c : chain_draws) min_len = std::min(min_len, c.size());
    const auto n_chains = static_cast<double>(chain_draws.size());
    const double m = static_cast<double>(min_len);
    if (n_chains * m < 8.0)
        throw ValidationError(Errc::insufficient_draws, "ess needs >= 8 total draws");

    double within = 0.0;
    Eigen::VectorXd means(chain_draws.size());
    std::vector<Eigen::VectorXd> centered;
    for (std::size_t c = 0; c < chain_draws.size(); ++c) {
        const Eigen::VectorXd head = chain_draws[c].head(min_len);
        means[static_cast<Eigen::Index>(c)] = head.mean();
        within += variance_of(head);
        centered.push_back(head.array() - head.mean());
    }
    within /= n_chains;
    if (within <= 0.0) return kNaN;
    double var_plus = (m - 1.0) / m * within;
    if (chain_draws.size() >= 2) var_plus += variance_of(means);  // B/m with B = m var(means)

    // Mean autocovariance across chains at lag t (biased, divisor m).
    auto mean_autocov = [&](Eigen::Index t) {
        double acc = 0.0;
        for (const auto& x : centered)
            acc += x.head(min_len - t).dot(x.tail(min_len - t)) / m;
        return acc / n_chains;
    };

    // Geyer initial positive monotone sequence over paired lags.
    double tau = -1.0;
    double prev_pair = kInf;
    for (Eigen::Index t = 0; t + 1 < min_len; t += 2) {
        const double rho_even = 1.0 - (within - mean_autocov(t)) / var_plus;
        const double rho_odd = 1.0 - (within - mean_autocov(t + 1)) / var_plus;
        double pair = rho_even + rho_odd;
        if (pair < 0.0) break;
        pair = std::min(pair, prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        if (pair <= 0.0) break;
    }
    tau = std::max(tau, 1.0 / (n_chains * m));
    const double total = n_chains * m;
    return std::min(total / tau, 1.5 * total);
}

void leapfrog(Eigen::VectorXd& position, Eigen::VectorXd& momentum, double step_size, int n_steps,
              const LogDensityGradFn& logdensity_with_grad) {
    if (!(step_size > 0.0))
        throw ValidationError(Errc::invalid_config, "step_size must be positive");
    Eigen::VectorXd grad(position.size());
    logdensity_with_grad(position, grad);
    for (int step = 0; step < n_steps; ++step) {
        momentum += 0.5 * step_size * grad;
        position += step_size * momentum;
        logdensity_with_grad(position, grad);
        momentum += 0.5 * step_size * grad;
    }
}

PosteriorDraws sample(const LogDensityModel& model, const FitConfig& config) {
    config.validate();
    if (model.dim() <= 0) throw ValidationError(Errc::invalid_config, "model dimension must be positive");

    PosteriorDraws draws;
    draws.config = config;
    draws.model_name = model.name();
    draws.rng_name = Rng::name();
    draws.parameter_names = model.parameter_names();
    draws.chains.resize(static_cast<std::size_t>(config.chains));
    draws.divergences.assign(static_cast<std::size_t>(config.chains), 0);
    draws.accept_rate.assign(static_cast<std::size_t>(config.chains), 0.0);

    auto run_chain = [&](int index) {
        NutsChain chain(model, config, index);
        auto result = chain.run();
        draws.chains[static_cast<std::size_t>(index)] = std::move(result.constrained);
        draws.divergences[static_cast<std::size_t>(index)] = result.divergences;
        draws.accept_rate[static_cast<std::size_t>(index)] = result.accept_rate;
    };

    if (config.parallel_chains && config.chains > 1) {
        std::vector<std::future<void>> futures;
        futures.reserve(static_cast<std::size_t>(config.chains));
        for (int c = 0; c < config.chains; ++c)
            futures.push_back(std::async(std::launch::async, run_chain, c));
        for (auto& f : futures) f.get();
    } else {
        for (int c = 0; c < config.chains; ++c) run_chain(c);
    }

    draws.compute_diagnostics();
    return draws;
}

PosteriorDraws sample(const LogDensityGradFn& logdensity_with_grad, int dim,
                      const FitConfig& config) {
    return sample(FunctionModel(logdensity_with_grad, dim), config);
}

void save_draws(const PosteriorDraws& draws, const std::string& csv_path,
                const std::string& json_path) {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw ValidationError(Errc::parse_error, "cannot write " + csv_path);
    csv << "chain,iteration";
    for (const auto& name : draws.parameter_names) csv << ',' << name;
    csv << "\n";
    for (int c = 0; c < draws.n_chains(); ++c) {
        const auto& chain = draws.chains[static_cast<std::size_t>(c)];
        for (Eigen::Index r = 0; r < chain.rows(); ++r) {
            const long iteration =
                draws.config.warmup + (static_cast<long>(r) + 1) * draws.config.thin;
            csv << (c + 1) << ',' << iteration;
            for (Eigen::Index j = 0; j < chain.cols(); ++j)
                csv << ',' << format_double(chain(r, j));
            csv << "\n";
        }
    }
    if (!csv) throw ValidationError(Errc::parse_error, "write failed: " + csv_path);
    csv.close();

    nlohmann::json summary;
    summary["version"] = 1;
    summary["model"] = draws.model_name;
    summary["rng"] = draws.rng_name;
    summary["seed"] = draws.config.seed;
    summary["config"] = {{"chains", draws.config.chains},
                         {"iterations", draws.config.iterations},
                         {"warmup", draws.config.warmup},
                         {"thin", draws.config.thin},
                         {"target_accept", draws.config.target_accept},
                         {"max_tree_depth", draws.config.max_tree_depth},
                         {"prior_overrides", draws.config.prior_overrides}};
    summary["divergences"] = draws.divergences;
    summary["accept_rate"] = draws.accept_rate;
    summary["not_converged"] = draws.not_converged();
    auto params = nlohmann::json::array();
    for (int j = 0; j < draws.dim(); ++j) {
        const Eigen::VectorXd values = draws.merged(j);
        params.push_back({{"name", draws.parameter_names[static_cast<std::size_t>(j)]},
                          {"mean", values.mean()},
                          {"sd", sd_of(values)},
                          {"ci_low", quantile_of(values, 0.025)},
                          {"ci_high", quantile_of(values, 0.975)},
                          {"rhat", draws.rhat[static_cast<std::size_t>(j)]},
                          {"ess", draws.ess[static_cast<std::size_t>(j)]}});
    }
    summary["parameters"] = params;
    if (draws.fixed_sigma_s) {
        auto arr = nlohmann::json::array();
        for (Eigen::Index i = 0; i < draws.fixed_sigma_s->size(); ++i)
            arr.push_back((*draws.fixed_sigma_s)[i]);
        summary["fixed_sigma_s"] = arr;
    }
    if (draws.fixed_tau) summary["fixed_tau"] = *draws.fixed_tau;

    std::ofstream json_file(json_path, std::ios::trunc);
    if (!json_file) throw ValidationError(Errc::parse_error, "cannot write " + json_path);
    json_file << summary.dump(2) << "\n";
    if (!json_file) throw ValidationError(Errc::parse_error, "write failed: " + json_path);
}

PosteriorDraws load_draws(const std::string& csv_path, const std::string& json_path) {
    std::ifstream json_file(json_path);
    if (!json_file)
        throw ValidationError(Errc::missing_draws_file, "cannot open " + json_path);
    nlohmann::json summary;
    try {
        json_file >> summary;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(Errc::parse_error, json_path + ": " + e.what());
    }

    PosteriorDraws draws;
    draws.model_name = summary.value("model", "custom");
    draws.rng_name = summary.value("rng", "");
    const auto& config = summary.at("config");
    draws.config.chains = config.at("chains").get<int>();
    draws.config.iterations = config.at("iterations").get<int>();
    draws.config.warmup = config.at("warmup").get<int>();
    draws.config.thin = config.at("thin").get<int>();
    draws.config.target_accept = config.at("target_accept").get<double>();
    draws.config.max_tree_depth = config.at("max_tree_depth").get<int>();
    draws.config.seed = summary.at("seed").get<std::uint64_t>();
    if (config.contains("prior_overrides"))
        draws.config.prior_overrides =
            config.at("prior_overrides").get<std::map<std::string, double>>();
    draws.divergences = summary.at("divergences").get<std::vector<int>>();
    if (summary.contains("accept_rate"))
        draws.accept_rate = summary.at("accept_rate").get<std::vector<double>>();
    if (summary.contains("fixed_sigma_s")) {
        const auto values = summary.at("fixed_sigma_s").get<std::vector<double>>();
        Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
        for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i];
        draws.fixed_sigma_s = v;
    }
    if (summary.contains("fixed_tau") && !summary.at("fixed_tau").is_null())
        draws.fixed_tau = summary.at("fixed_tau").get<double>();

    std::ifstream csv(csv_path);
    if (!csv) throw ValidationError(Errc::missing_draws_file, "cannot open " + csv_path);
    std::string line;
    if (!std::getline(csv, line))
        throw ValidationError(Errc::parse_error, csv_path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::stringstream header(line);
    std::string field;
    std::vector<std::string> columns;
    while (std::getline(header, field, ',')) columns.push_back(field);
    if (columns.size() < 3 || columns[0] != "chain" || columns[1] != "iteration")
        throw ValidationError(Errc::schema_error, csv_path + ": expected chain,iteration,<params>");
    draws.parameter_names.assign(columns.begin() + 2, columns.end());

    const int retained = draws.config.retained_per_chain();
    draws.chains.assign(static_cast<std::size_t>(draws.config.chains),
                        Eigen::MatrixXd(retained, static_cast<Eigen::Index>(draws.parameter_names.size())));
    std::vector<int> rows(static_cast<std::size_t>(draws.config.chains), 0);
    int line_number = 1;
    while (std::getline(csv, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream row_stream(line);
        std::vector<std::string> fields;
        while (std::getline(row_stream, field, ',')) fields.push_back(field);
        if (fields.size() != columns.size())
            throw ValidationError(Errc::parse_error,
                                  csv_path + ": line " + std::to_string(line_number));
        bool ok = false;
        const int chain_id = static_cast<int>(parse_double(fields[0], ok));
        if (!ok || chain_id < 1 || chain_id > draws.config.chains)
            throw ValidationError(Errc::parse_error,
                                  csv_path + ": bad chain id at line " + std::to_string(line_number));
        auto& row_index = rows[static_cast<std::size_t>(chain_id - 1)];
        if (row_index >= retained)
            throw ValidationError(Errc::parse_error,
                                  csv_path + ": more draws than config allows for chain " +
                                      std::to_string(chain_id));
        for (std::size_t j = 2; j < fields.size(); ++j) {
            const double value = parse_double(fields[j], ok);
            if (!ok)
                throw ValidationError(Errc::parse_error, csv_path + ": bad value at line " +
                                                             std::to_string(line_number));
            draws.chains[static_cast<std::size_t>(chain_id - 1)](
                row_index, static_cast<Eigen::Index>(j - 2)) = value;
        }
        ++row_index;
    }
    for (int c = 0; c < draws.config.chains; ++c)
        if (rows[static_cast<std::size_t>(c)] != retained)
            throw ValidationError(Errc::parse_error,
                                  csv_path + ": chain " + std::to_string(c + 1) + " has " +
                                      std::to_string(rows[static_cast<std::size_t>(c)]) +
                                      " draws, expected " + std::to_string(retained));

    draws.compute_diagnostics();
    return draws;
}

}  // namespace metapool
