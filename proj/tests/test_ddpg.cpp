#include <cmath>
#include <set>

#include "doctest.h"
#include "gp/ddpg.hpp"

using namespace gp;

namespace {

std::string model_path(const char* name) { return std::string(GP_SOURCE_DIR "/models/") + name; }

// Fixed per-node state vector: tests that do not care about state content.
template <typename S>
typename SearchEngine<S>::StateFn toy_state_fn() {
  return [](const RatioAssignment& ratios, int node) {
    std::vector<S> s(size_t(kAggregatorWidth), S(0));
    for (int j = 0; j < kAggregatorWidth; ++j)
      s[size_t(j)] = S(std::sin(0.3 * node + 0.1 * j));
    s[0] = S(ratios.empty() ? 0.0 : ratios[0]);
    return s;
  };
}

}  // namespace

TEST_CASE("truncated normal") {
  Rng rng(1);
  SUBCASE("eta zero degenerates to mu") {
    CHECK(sample_truncated_normal(0.37, 0.0, rng) == 0.37);
    CHECK(sample_truncated_normal(1.7, 0.0, rng) == 1.7);  // no clamping when eta == 0
  }
  SUBCASE("samples stay in [0,1]") {
    for (int i = 0; i < 5000; ++i) {
      double v = sample_truncated_normal(0.1, 0.8, rng);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  SUBCASE("symmetric mean oracle") {
    double acc = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += sample_truncated_normal(0.5, 0.2, rng);
    // Symmetric truncation keeps the mean at mu; sd of the estimate ~0.0014.
    CHECK(std::fabs(acc / n - 0.5) < 0.006);
  }
  SUBCASE("negative eta rejected") {
    CHECK_THROWS_AS(sample_truncated_normal(0.5, -0.1, rng), std::invalid_argument);
  }
}

TEST_CASE("replay buffer is FIFO with bounded capacity") {
  ReplayBuffer buf(4);
  for (int i = 0; i < 7; ++i) {
    Transition t;
    t.action = float(i);
    buf.push(std::move(t));
  }
  CHECK(buf.size() == 4);
  CHECK(buf.at(0).action == 3.0f);  // oldest three were evicted
  CHECK(buf.at(3).action == 6.0f);

  Rng rng(2);
  auto batch = buf.sample(3, rng);
  CHECK(batch.size() == 3);
  std::set<const Transition*> uniq(batch.begin(), batch.end());
  CHECK(uniq.size() == 3);  // without replacement
  CHECK(buf.sample(10, rng).size() == 4);  // clamped to size
}

TEST_CASE("enforce_budget matches a brute-force oracle") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  std::vector<double> grid{0.25, 0.5, 0.75, 1.0};
  const size_t np = g.prunable.size();
  RatioAssignment full = apply_ratio_sharing_prunable(g, std::vector<double>(np, 1.0));
  SearchConfig cfg;
  cfg.budget = count_flops(g, full) / 2;
  cfg.seed = 3;
  SearchEngine<float> eng(g, grid, cfg, toy_state_fn<float>(),
                          [](const RatioAssignment&) { return 0.0; });
  Rng rng(4);
  std::uniform_real_distribution<double> d(0.25, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> raw(np);
    for (auto& v : raw) v = grid[std::uniform_int_distribution<size_t>(0, 3)(rng)];
    size_t index = std::uniform_int_distribution<size_t>(0, np - 1)(rng);
    double a = d(rng);
    double got = eng.enforce_budget(raw, index, a);
    // Oracle: largest feasible grid value <= a (grid minimum always a candidate),
    // later layers pinned to the minimum, min'd with the raw action.
    double best = -1;
    for (double gv : grid) {
      if (gv > a + 1e-12 && gv != grid.front()) continue;
      std::vector<double> probe = raw;
      probe[index] = gv;
      for (size_t k = index + 1; k < np; ++k) probe[k] = grid.front();
      if (count_flops(g, apply_ratio_sharing_prunable(g, probe)) <= cfg.budget)
        best = std::max(best, gv);
    }
    double expect = best < 0 ? grid.front() : std::min(a, best);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(got <= a + 1e-12);
  }
}

TEST_CASE("unconstrained budget passes actions through") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.budget = 0;
  SearchEngine<float> eng(g, {0.5, 1.0}, cfg, toy_state_fn<float>(),
                          [](const RatioAssignment&) { return 0.0; });
  std::vector<double> raw(g.prunable.size(), 1.0);
  CHECK(eng.enforce_budget(raw, 0, 0.77) == 0.77);
}

TEST_CASE("run_episode transition structure") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.warmup_episodes = 10;
  cfg.seed = 5;
  std::vector<double> grid{0.25, 0.5, 0.75, 1.0};
  int evals = 0;
  SearchEngine<float> eng(g, grid, cfg, toy_state_fn<float>(), [&](const RatioAssignment& r) {
    ++evals;
    double s = 0;
    for (double v : r) s += v;
    return s;
  });
  auto ep = eng.run_episode(0);  // warmup: random grid actions
  CHECK(ep.transitions.size() == g.prunable.size());
  CHECK(evals == 1);
  for (size_t k = 0; k < ep.transitions.size(); ++k) {
    const Transition& t = ep.transitions[k];
    CHECK(t.reward == ep.reward);  // episode reward shared by every transition
    bool on_grid = false;
    for (double gv : grid) on_grid |= std::fabs(double(t.action) - gv) < 1e-7;
    CHECK(on_grid);
    CHECK(t.state.size() == size_t(kAggregatorWidth));
    if (k + 1 == ep.transitions.size()) {
      CHECK(t.terminal);
      for (float v : t.next_state) CHECK(v == 0.0f);
    } else {
      CHECK_FALSE(t.terminal);
      CHECK(t.next_state == ep.transitions[k + 1].state);
    }
  }
  CHECK(ep.flops == count_flops(g, ep.ratios));

  // Post-warmup actions are also snapped to the grid.
  auto ep2 = eng.run_episode(50);
  for (const Transition& t : ep2.transitions) {
    bool on_grid = false;
    for (double gv : grid) on_grid |= std::fabs(double(t.action) - gv) < 1e-7;
    CHECK(on_grid);
  }
}

TEST_CASE("infeasible budget fails fast") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.budget = 1;  // below any achievable FLOPs
  SearchEngine<float> eng(g, {0.5, 1.0}, cfg, toy_state_fn<float>(),
                          [](const RatioAssignment&) { return 0.0; });
  CHECK_THROWS_WITH_AS(eng.run_episode(0), doctest::Contains("budget"), std::runtime_error);
}

TEST_CASE("critic single-transition loss equals squared Bellman error") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.seed = 7;
  SearchEngine<double> eng(g, {0.5, 1.0}, cfg, toy_state_fn<double>(),
                           [](const RatioAssignment&) { return 0.0; });
  Transition t;
  t.state.assign(size_t(kAggregatorWidth), 0.25f);
  t.action = 0.5f;
  t.reward = 0.8;
  t.terminal = true;  // no bootstrap term
  t.next_state.assign(size_t(kAggregatorWidth), 0.0f);
  // Q(s,a) before the update, computed independently.
  std::vector<double> sv(t.state.begin(), t.state.end());
  Tensor<double> s = Tensor<double>::from_data(Shape{1, kAggregatorWidth}, std::move(sv));
  Tensor<double> a = Tensor<double>::from_data(Shape{1, 1}, {0.5});
  double q = critic_forward(eng.critic(), s, a).item();
  double loss = eng.critic_update({&t});
  // Empty reward window: normalize_reward is the identity.
  CHECK(loss == doctest::Approx((q - 0.8) * (q - 0.8)).epsilon(1e-9));
}

TEST_CASE("gamma zero removes the bootstrap term") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.discount = 0.0;
  cfg.seed = 8;
  SearchEngine<double> eng(g, {0.5, 1.0}, cfg, toy_state_fn<double>(),
                           [](const RatioAssignment&) { return 0.0; });
  Transition t;
  t.state.assign(size_t(kAggregatorWidth), -0.1f);
  t.action = 1.0f;
  t.reward = 0.3;
  t.terminal = false;  // non-terminal, but gamma = 0 kills the target-network term
  t.next_state.assign(size_t(kAggregatorWidth), 0.7f);
  std::vector<double> sv(t.state.begin(), t.state.end());
  Tensor<double> s = Tensor<double>::from_data(Shape{1, kAggregatorWidth}, std::move(sv));
  Tensor<double> a = Tensor<double>::from_data(Shape{1, 1}, {1.0});
  double q = critic_forward(eng.critic(), s, a).item();
  CHECK(eng.critic_update({&t}) == doctest::Approx((q - 0.3) * (q - 0.3)).epsilon(1e-9));
}

TEST_CASE("repeated critic updates reduce the Bellman loss") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.seed = 9;
  SearchEngine<double> eng(g, {0.25, 0.5, 0.75, 1.0}, cfg, toy_state_fn<double>(),
                           [](const RatioAssignment&) { return 0.0; });
  Rng rng(10);
  std::vector<Transition> data;
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int i = 0; i < 16; ++i) {
    Transition t;
    t.state.assign(size_t(kAggregatorWidth), 0.0f);
    for (auto& v : t.state) v = float(d(rng) - 0.5);
    t.action = float(d(rng));
    t.reward = double(t.action) * 2 - 1;  // learnable mapping
    t.terminal = true;
    t.next_state.assign(size_t(kAggregatorWidth), 0.0f);
    data.push_back(std::move(t));
  }
  std::vector<const Transition*> batch;
  for (auto& t : data) batch.push_back(&t);
  double first = eng.critic_update(batch);
  double last = first;
  for (int i = 0; i < 80; ++i) last = eng.critic_update(batch);
  CHECK(last < first);
  CHECK(last < 0.1 * first);
}

TEST_CASE("reward normalization uses the trailing window") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  SearchEngine<double> eng(g, {0.5, 1.0}, cfg, toy_state_fn<double>(),
                           [](const RatioAssignment&) { return 0.0; });
  CHECK(eng.normalize_reward(0.42) == 0.42);  // empty window: identity
}

TEST_CASE("noise decays per episode") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.episodes = 20;
  cfg.warmup_episodes = 20;  // keep episodes cheap: no updates
  cfg.noise_init = 0.5;
  cfg.noise_decay = 0.9;
  SearchEngine<float> eng(g, {0.5, 1.0}, cfg, toy_state_fn<float>(), [](const RatioAssignment& r) {
    double s = 0;
    for (double v : r) s += v;
    return s;
  });
  auto res = eng.search();
  CHECK(eng.noise() == doctest::Approx(0.5 * std::pow(0.9, 20)).epsilon(1e-12));
  REQUIRE(res.log.size() == 20);
  CHECK(res.log.front().noise == doctest::Approx(0.5));
}

TEST_CASE("all-warmup search degenerates to random search and tracks the best") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  SearchConfig cfg;
  cfg.episodes = 60;
  cfg.warmup_episodes = 60;
  cfg.seed = 11;
  RatioAssignment full = apply_ratio_sharing_prunable(g, std::vector<double>(g.prunable.size(), 1.0));
  cfg.budget = count_flops(g, full) * 6 / 10;
  SearchEngine<float> eng(g, {0.25, 0.5, 0.75, 1.0}, cfg, toy_state_fn<float>(),
                          [](const RatioAssignment& r) {
                            double s = 0;
                            for (double v : r) s += v * (1 - v);
                            return s;
                          });
  auto res = eng.search();
  double best_feasible = -1e300;
  for (const auto& e : res.log)
    if (e.flops <= cfg.budget) best_feasible = std::max(best_feasible, e.reward);
  CHECK(res.best_reward == best_feasible);
  CHECK(res.best_flops <= cfg.budget);
  CHECK(count_flops(g, res.best_ratios) == res.best_flops);
}
