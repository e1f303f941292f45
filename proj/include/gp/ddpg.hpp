#pragma once

#include <deque>
#include <functional>

#include "gp/graph_ir.hpp"
#include "gp/tensor.hpp"
#include "gp/trainer.hpp"

namespace gp {

// Two affine layers with a ReLU between.
template <typename S>
struct TwoLayerNet {
  Tensor<S> w1, b1, w2, b2;

  void init(int in, int hidden, int out, Rng& rng) {
    w1 = Tensor<S>(Shape{in, hidden}, S(0), true);
    b1 = Tensor<S>(Shape{hidden}, S(0), true);
    w2 = Tensor<S>(Shape{hidden, out}, S(0), true);
    b2 = Tensor<S>(Shape{out}, S(0), true);
    glorot_init(w1, in, hidden, rng);
    glorot_init(w2, hidden, out, rng);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }

  std::vector<Tensor<S>> params() { return {w1, b1, w2, b2}; }

  void copy_from(const TwoLayerNet& src) {
    auto d = const_cast<TwoLayerNet&>(src).params();
    auto t = params();
    for (size_t i = 0; i < t.size(); ++i) t[i].data() = d[i].data();
  }

  void soft_update_from(TwoLayerNet& src, S tau) {
    auto d = src.params();
    auto t = params();
    for (size_t i = 0; i < t.size(); ++i)
      for (int64_t j = 0; j < t[i].numel(); ++j)
        t[i].data()[size_t(j)] = (S(1) - tau) * t[i].data()[size_t(j)] + tau * d[i].data()[size_t(j)];
  }
};

inline constexpr int kDdpgHidden = 64;

// mu(s) in [0,1], logistic squash.
template <typename S>
Tensor<S> actor_forward(const TwoLayerNet<S>& actor, const Tensor<S>& states) {
  return sigmoid(actor.forward(states));
}

template <typename S>
Tensor<S> critic_forward(const TwoLayerNet<S>& critic, const Tensor<S>& states,
                         const Tensor<S>& actions) {
  return critic.forward(concat_cols(states, actions));
}

// Truncated normal TN(mu, eta^2, 0, 1) by rejection; eta = 0 degenerates to mu.
inline double sample_truncated_normal(double mu, double eta, Rng& rng) {
  if (eta < 0) throw std::invalid_argument("sample_truncated_normal: negative eta");
  if (eta == 0) return mu;
  std::normal_distribution<double> dist(mu, eta);
  for (int tries = 0; tries < 10000; ++tries) {
    double v = dist(rng);
    if (v >= 0.0 && v <= 1.0) return v;
  }
  return std::clamp(mu, 0.0, 1.0);
}

struct Transition {
  std::vector<float> state;
  float action = 0;
  double reward = 0;  // episode reward, shared by all transitions of the episode
  std::vector<float> next_state;
  bool terminal = false;
};

// Bounded FIFO with seeded uniform without-replacement sampling.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {}

  void push(Transition t) {
    if (buf_.size() == capacity_) buf_.pop_front();
    buf_.push_back(std::move(t));
  }

  size_t size() const { return buf_.size(); }
  size_t capacity() const { return capacity_; }
  const Transition& at(size_t i) const { return buf_[i]; }

  std::vector<const Transition*> sample(size_t n, Rng& rng) const {
    n = std::min(n, buf_.size());
    std::vector<size_t> idx(buf_.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    for (size_t i = 0; i < n; ++i) {
      size_t j = std::uniform_int_distribution<size_t>(i, idx.size() - 1)(rng);
      std::swap(idx[i], idx[j]);
    }
    std::vector<const Transition*> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) out.push_back(&buf_[idx[i]]);
    return out;
  }

 private:
  size_t capacity_;
  std::deque<Transition> buf_;
};

struct SearchConfig {
  int episodes = 300;
  int warmup_episodes = 100;
  double noise_init = 0.5;
  double noise_decay = 0.99;
  double discount = 0.5;
  int64_t budget = 0;  // FLOPs bound; <= 0 means unconstrained
  int batch_size = 64;
  double tau = 0.01;
  size_t replay_capacity = 2000;
  int updates_per_episode = 10;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  int reward_window = 64;
  uint64_t seed = 1;

  void validate() const {
    if (warmup_episodes < 0) throw std::invalid_argument("search: warmup_episodes must be >= 0");
    if (!(discount >= 0.0) || discount >= 1.0)
      throw std::invalid_argument("search: discount must be in [0,1)");
    if (!(noise_init > 0.0)) throw std::invalid_argument("search: noise_init must be > 0");
  }
};

// Adam, used for the actor/critic updates only.
template <typename S>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor<S>> params, S lr, S beta1 = S(0.9), S beta2 = S(0.999),
                         S eps = S(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p.numel(), S(0));
      v_.emplace_back(p.numel(), S(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    S bc1 = S(1) - S(std::pow(double(beta1_), double(t_)));
    S bc2 = S(1) - S(std::pow(double(beta2_), double(t_)));
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (p.grad().empty()) continue;
      for (int64_t i = 0; i < p.numel(); ++i) {
        S g = p.grad()[size_t(i)];
        m_[k][size_t(i)] = beta1_ * m_[k][size_t(i)] + (S(1) - beta1_) * g;
        v_[k][size_t(i)] = beta2_ * v_[k][size_t(i)] + (S(1) - beta2_) * g * g;
        p.data()[size_t(i)] -= lr_ * (m_[k][size_t(i)] / bc1) / (std::sqrt(v_[k][size_t(i)] / bc2) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> m_, v_;
  S lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

struct SearchLogEntry {
  int episode = 0;
  double reward = 0;
  int64_t flops = 0;
  double noise = 0;
  RatioAssignment ratios;
};

struct SearchResult {
  RatioAssignment best_ratios;
  double best_reward = -1e300;
  int64_t best_flops = 0;
  std::vector<SearchLogEntry> log;
};

template <typename S>
class SearchEngine {
 public:
  // Episode reward for a full assignment (recalibrated accuracy, or a synthetic reward).
  using Evaluator = std::function<double(const RatioAssignment&)>;
  // Aggregated embedding row for `node` under the partial assignment.
  using StateFn = std::function<std::vector<S>(const RatioAssignment&, int node)>;

  SearchEngine(const ModelGraph& g, const std::vector<double>& ratio_grid, SearchConfig cfg,
               StateFn state_fn, Evaluator evaluator)
      : graph_(g),
        grid_(ratio_grid),
        cfg_(cfg),
        state_fn_(std::move(state_fn)),
        evaluator_(std::move(evaluator)),
        buffer_(cfg.replay_capacity),
        rng_(cfg.seed),
        noise_(cfg.noise_init) {
    cfg_.validate();
    Rng init_rng(cfg.seed);
    actor_.init(kAggregatorWidth, kDdpgHidden, 1, init_rng);
    critic_.init(kAggregatorWidth + 1, kDdpgHidden, 1, init_rng);
    actor_target_.init(kAggregatorWidth, kDdpgHidden, 1, init_rng);
    critic_target_.init(kAggregatorWidth + 1, kDdpgHidden, 1, init_rng);
    actor_target_.copy_from(actor_);
    critic_target_.copy_from(critic_);
    actor_opt_ = std::make_unique<AdamOptimizer<S>>(actor_.params(), S(cfg_.actor_lr));
    critic_opt_ = std::make_unique<AdamOptimizer<S>>(critic_.params(), S(cfg_.critic_lr));
  }

  double actor_mu(const std::vector<S>& state) {
    Tensor<S> s = Tensor<S>::from_data(Shape{1, kAggregatorWidth}, state);
    return double(actor_forward(actor_, s).data()[0]);
  }

  // Largest a' <= a such that fixing prunable layer `index` at a' and all
  // later free layers at the grid minimum keeps FLOPs within budget.
  // Evaluated on grid resolution; unconstrained budgets pass a through.
  double enforce_budget(const std::vector<double>& raw_prunable, size_t index, double a) const {
    if (cfg_.budget <= 0) return a;
    std::vector<double> probe = raw_prunable;
    for (size_t k = index + 1; k < probe.size(); ++k) probe[k] = grid_.front();
    double best = -1;
    for (double gv : grid_) {
      if (gv > a + 1e-12 && gv > grid_.front()) continue;
      probe[index] = gv;
      auto assignment = apply_ratio_sharing_prunable(graph_, probe);
      if (count_flops(graph_, assignment) <= cfg_.budget) best = std::max(best, gv);
    }
    if (best < 0) {
      // Even the grid minimum busts the budget here; fall back to the minimum.
      return grid_.front();
    }
    return std::min(a, best);
  }

  struct Episode {
    RatioAssignment ratios;
    double reward = 0;
    int64_t flops = 0;
    std::vector<Transition> transitions;
  };

  Episode run_episode(int episode_index) {
    const auto& prunable = graph_.prunable;
    std::vector<double> raw(prunable.size(), 1.0);
    if (cfg_.budget > 0) {
      std::vector<double> min_raw(prunable.size(), grid_.front());
      if (count_flops(graph_, apply_ratio_sharing_prunable(graph_, min_raw)) > cfg_.budget)
        throw std::runtime_error("search: budget " + std::to_string(cfg_.budget) +
                                 " is below the minimum achievable FLOPs");
    }
    Episode ep;
    std::vector<std::vector<S>> states;
    std::uniform_int_distribution<size_t> pick(0, grid_.size() - 1);
    for (size_t k = 0; k < prunable.size(); ++k) {
      auto partial = apply_ratio_sharing_prunable(graph_, raw);
      states.push_back(state_fn_(partial, prunable[k]));
      double a;
      if (episode_index < cfg_.warmup_episodes) {
        a = grid_[pick(rng_)];
      } else {
        double mu = actor_mu(states.back());
        a = sample_truncated_normal(mu, noise_, rng_);
        a = enforce_budget(raw, k, a);
        a = snap_to_grid(grid_, a);
      }
      raw[k] = a;
      Transition t;
      t.state.assign(states.back().begin(), states.back().end());
      t.action = float(a);
      ep.transitions.push_back(std::move(t));
    }
    ep.ratios = apply_ratio_sharing_prunable(graph_, raw);
    ep.flops = count_flops(graph_, ep.ratios);
    ep.reward = evaluator_(ep.ratios);
    for (size_t k = 0; k < ep.transitions.size(); ++k) {
      ep.transitions[k].reward = ep.reward;
      if (k + 1 < ep.transitions.size()) {
        ep.transitions[k].next_state.assign(states[k + 1].begin(), states[k + 1].end());
      } else {
        ep.transitions[k].next_state.assign(size_t(kAggregatorWidth), 0.0f);
        ep.transitions[k].terminal = true;
      }
    }
    return ep;
  }

  // One Bellman-variant update on a replay batch; returns the critic loss.
  double critic_update(const std::vector<const Transition*>& batch) {
    if (batch.empty()) throw std::invalid_argument("critic_update: empty batch");
    const int n = int(batch.size());
    std::vector<S> s, sn, a;
    std::vector<double> y(size_t(n), 0.0);
    for (const Transition* t : batch) {
      s.insert(s.end(), t->state.begin(), t->state.end());
      sn.insert(sn.end(), t->next_state.begin(), t->next_state.end());
      a.push_back(S(t->action));
    }
    Tensor<S> states = Tensor<S>::from_data(Shape{n, kAggregatorWidth}, std::move(s));
    Tensor<S> next_states = Tensor<S>::from_data(Shape{n, kAggregatorWidth}, std::move(sn));
    Tensor<S> actions = Tensor<S>::from_data(Shape{n, 1}, std::move(a));
    // Bootstrap term from the target networks; zero on terminal transitions.
    Tensor<S> mu_next = actor_forward(actor_target_, next_states).detach();
    Tensor<S> q_next = critic_forward(critic_target_, next_states, mu_next).detach();
    std::vector<S> targets(size_t(n), S(0));
    for (int i = 0; i < n; ++i) {
      double r_hat = normalize_reward(batch[size_t(i)]->reward);
      double boot = batch[size_t(i)]->terminal ? 0.0 : cfg_.discount * double(q_next.data()[size_t(i)]);
      targets[size_t(i)] = S(r_hat + boot);
    }
    Tensor<S> y_t = Tensor<S>::from_data(Shape{n, 1}, std::move(targets));
    critic_opt_->zero_grad();
    actor_opt_->zero_grad();
    Tensor<S> q = critic_forward(critic_, states, actions);
    Tensor<S> loss = mean(square(sub(q, y_t)));
    double l_r = double(loss.item());
    loss.backward();
    critic_opt_->step();
    // Deterministic policy gradient: ascend Q(s, mu(s)).
    critic_opt_->zero_grad();
    actor_opt_->zero_grad();
    Tensor<S> mu = actor_forward(actor_, states);
    Tensor<S> actor_loss = neg(mean(critic_forward(critic_, states, mu)));
    actor_loss.backward();
    actor_opt_->step();
    actor_target_.soft_update_from(actor_, S(cfg_.tau));
    critic_target_.soft_update_from(critic_, S(cfg_.tau));
    return l_r;
  }

  double normalize_reward(double r) const {
    if (reward_window_.empty()) return r;
    double mean = 0;
    for (double v : reward_window_) mean += v;
    mean /= double(reward_window_.size());
    double var = 0;
    for (double v : reward_window_) var += (v - mean) * (v - mean);
    double sd = std::sqrt(var / double(reward_window_.size()));
    return (r - mean) / (sd + 1e-6);
  }

  SearchResult search() {
    SearchResult result;
    for (int e = 0; e < cfg_.episodes; ++e) {
      Episode ep = run_episode(e);
      for (auto& t : ep.transitions) buffer_.push(std::move(t));
      reward_window_.push_back(ep.reward);
      while (int(reward_window_.size()) > cfg_.reward_window) reward_window_.pop_front();
      if (e >= cfg_.warmup_episodes && buffer_.size() >= size_t(cfg_.batch_size)) {
        for (int u = 0; u < cfg_.updates_per_episode; ++u)
          critic_update(buffer_.sample(size_t(cfg_.batch_size), rng_));
      }
      bool feasible = cfg_.budget <= 0 || ep.flops <= cfg_.budget;
      if (feasible && ep.reward > result.best_reward) {
        result.best_reward = ep.reward;
        result.best_ratios = ep.ratios;
        result.best_flops = ep.flops;
      }
      result.log.push_back({e, ep.reward, ep.flops, noise_, ep.ratios});
      noise_ *= cfg_.noise_decay;
    }
    if (result.best_ratios.empty())
      throw std::runtime_error("search: no feasible configuration found");
    return result;
  }

  double noise() const { return noise_; }
  ReplayBuffer& buffer() { return buffer_; }
  TwoLayerNet<S>& actor() { return actor_; }
  TwoLayerNet<S>& critic() { return critic_; }
  TwoLayerNet<S>& actor_target() { return actor_target_; }
  TwoLayerNet<S>& critic_target() { return critic_target_; }
  Rng& rng() { return rng_; }

 private:
  const ModelGraph& graph_;
  std::vector<double> grid_;
  SearchConfig cfg_;
  StateFn state_fn_;
  Evaluator evaluator_;
  TwoLayerNet<S> actor_, critic_, actor_target_, critic_target_;
  std::unique_ptr<AdamOptimizer<S>> actor_opt_, critic_opt_;
  ReplayBuffer buffer_;
  std::deque<double> reward_window_;
  Rng rng_;
  double noise_;
};

// States taken from the trained pipeline's aggregator.
template <typename S>
typename SearchEngine<S>::StateFn pipeline_state_fn(Pipeline<S>& pipeline) {
  return [&pipeline](const RatioAssignment& ratios, int node) {
    Tensor<S> emb = pipeline.node_embeddings(ratios).detach();
    std::vector<S> row(size_t(kAggregatorWidth), S(0));
    std::copy_n(emb.data().begin() + size_t(node) * kAggregatorWidth, kAggregatorWidth, row.begin());
    return row;
  };
}

}  // namespace gp
