#include "ampl/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace ampl {

namespace {

using nlohmann::json;

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_json_vector(const json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void moments(const std::vector<Vector>& rows, Vector& mean, Vector& std) {
  const auto n = static_cast<double>(rows.size());
  mean = Vector::Zero(rows.front().size());
  for (const auto& r : rows) mean += r;
  mean /= n;
  Vector var = Vector::Zero(mean.size());
  for (const auto& r : rows) var += (r - mean).cwiseAbs2();
  std = (var / n).cwiseSqrt();
}

bool close(const Vector& a, const Vector& b, double tol) {
  return a.size() == b.size() && (a.size() == 0 || (a - b).cwiseAbs().maxCoeff() <= tol);
}

}  // namespace

RewardStats compute_reward_stats(const std::vector<Transition>& transitions) {
  if (transitions.empty()) throw std::invalid_argument("reward stats of an empty dataset");
  RewardStats st{transitions.front().r, transitions.front().r, 0.0};
  double sum = 0.0;
  for (const auto& t : transitions) {
    st.r_min = std::min(st.r_min, t.r);
    st.r_max = std::max(st.r_max, t.r);
    sum += t.r;
  }
  double mean = sum / static_cast<double>(transitions.size());
  double var = 0.0;
  for (const auto& t : transitions) var += (t.r - mean) * (t.r - mean);
  st.sigma_r = std::sqrt(var / static_cast<double>(transitions.size()));
  return st;
}

NormalizationStats compute_normalization_stats(const std::vector<Transition>& transitions) {
  if (transitions.empty()) throw std::invalid_argument("normalization stats of an empty dataset");
  std::vector<Vector> inputs, targets;
  inputs.reserve(transitions.size());
  targets.reserve(transitions.size());
  for (const auto& t : transitions) {
    Vector in(t.s.size() + t.a.size());
    in << t.s, t.a;
    Vector tg(1 + t.s.size());
    tg << t.r, t.s_next - t.s;
    inputs.push_back(std::move(in));
    targets.push_back(std::move(tg));
  }
  NormalizationStats st;
  moments(inputs, st.input_mean, st.input_std);
  moments(targets, st.target_mean, st.target_std);
  return st;
}

void OfflineDataset::recompute_stats() {
  reward_stats = compute_reward_stats(transitions);
  normalization = compute_normalization_stats(transitions);
}

void OfflineDataset::validate() const {
  if (transitions.empty()) throw std::invalid_argument("dataset has no transitions");
  if (initial_states.empty()) throw std::invalid_argument("dataset has no initial-state samples");
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const auto& t = transitions[i];
    if (t.s.size() != state_dim || t.s_next.size() != state_dim || t.a.size() != action_dim)
      throw std::invalid_argument("transition " + std::to_string(i) + " has wrong dimensions");
    if (!std::isfinite(t.r) || !t.s.allFinite() || !t.a.allFinite() || !t.s_next.allFinite())
      throw std::invalid_argument("transition " + std::to_string(i) + " is not finite");
  }
  for (const auto& s : initial_states)
    if (s.size() != state_dim) throw std::invalid_argument("initial state has wrong dimension");
  constexpr double kTol = 1e-9;
  RewardStats rs = compute_reward_stats(transitions);
  if (std::abs(rs.r_min - reward_stats.r_min) > kTol || std::abs(rs.r_max - reward_stats.r_max) > kTol ||
      std::abs(rs.sigma_r - reward_stats.sigma_r) > kTol)
    throw std::invalid_argument("stored reward stats do not match the transitions");
  NormalizationStats ns = compute_normalization_stats(transitions);
  if (!close(ns.input_mean, normalization.input_mean, kTol) || !close(ns.input_std, normalization.input_std, kTol) ||
      !close(ns.target_mean, normalization.target_mean, kTol) || !close(ns.target_std, normalization.target_std, kTol))
    throw std::invalid_argument("stored normalization stats do not match the transitions");
  std::size_t total = std::accumulate(episode_lengths.begin(), episode_lengths.end(), std::size_t{0});
  if (!episode_lengths.empty() && total != transitions.size())
    throw std::invalid_argument("episode lengths do not cover the transitions");
}

std::vector<double> OfflineDataset::episode_returns() const {
  std::vector<double> out;
  std::size_t i = 0;
  for (auto len : episode_lengths) {
    double ret = 0.0;
    for (std::size_t k = 0; k < len; ++k) ret += transitions[i++].r;
    out.push_back(ret);
  }
  return out;
}

double OfflineDataset::mean_episode_return() const {
  auto r = episode_returns();
  if (r.empty()) throw std::logic_error("dataset has no episode boundaries");
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
}

std::filesystem::path metadata_path(const std::filesystem::path& jsonl_path) {
  auto p = jsonl_path;
  return p.replace_extension(".meta.json");
}

std::filesystem::path initial_states_path(const std::filesystem::path& jsonl_path) {
  auto p = jsonl_path;
  return p.replace_extension(".init.jsonl");
}

void OfflineDataset::save(const std::filesystem::path& jsonl_path) const {
  {
    std::ofstream out(jsonl_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + jsonl_path.string());
    for (const auto& t : transitions) {
      json line = {{"s", to_std(t.s)}, {"a", to_std(t.a)}, {"r", t.r}, {"s_next", to_std(t.s_next)}, {"done", t.done ? 1 : 0}};
      out << line.dump() << "\n";
    }
  }
  {
    std::ofstream out(initial_states_path(jsonl_path), std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + initial_states_path(jsonl_path).string());
    for (const auto& s : initial_states) out << json(to_std(s)).dump() << "\n";
  }
  json meta;
  meta["state_dim"] = state_dim;
  meta["action_dim"] = action_dim;
  meta["quality"] = quality;
  meta["seed"] = seed;
  meta["n_transitions"] = transitions.size();
  meta["episode_lengths"] = episode_lengths;
  meta["rewards_normalized"] = rewards_normalized;
  meta["initial_states_file"] = initial_states_path(jsonl_path).filename().string();
  meta["reward_stats"] = {{"r_min", reward_stats.r_min}, {"r_max", reward_stats.r_max}, {"sigma_r", reward_stats.sigma_r}};
  meta["normalization_stats"] = {{"input_mean", to_std(normalization.input_mean)},
                                 {"input_std", to_std(normalization.input_std)},
                                 {"target_mean", to_std(normalization.target_mean)},
                                 {"target_std", to_std(normalization.target_std)}};
  std::ofstream out(metadata_path(jsonl_path), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + metadata_path(jsonl_path).string());
  out << meta.dump(2) << "\n";
}

OfflineDataset OfflineDataset::load(const std::filesystem::path& jsonl_path) {
  std::ifstream meta_in(metadata_path(jsonl_path));
  if (!meta_in) throw std::runtime_error("cannot read " + metadata_path(jsonl_path).string());
  json meta = json::parse(meta_in);
  OfflineDataset ds;
  ds.state_dim = meta.at("state_dim");
  ds.action_dim = meta.at("action_dim");
  ds.quality = meta.value("quality", "");
  ds.seed = meta.value("seed", std::uint64_t{0});
  ds.rewards_normalized = meta.value("rewards_normalized", false);
  ds.episode_lengths = meta.value("episode_lengths", std::vector<std::size_t>{});

  std::ifstream in(jsonl_path);
  if (!in) throw std::runtime_error("cannot read " + jsonl_path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      Transition t;
      t.s = from_json_vector(j.at("s"));
      t.a = from_json_vector(j.at("a"));
      t.r = j.at("r");
      t.s_next = from_json_vector(j.at("s_next"));
      t.done = j.at("done").get<int>() != 0;
      ds.transitions.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw std::runtime_error(jsonl_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  auto init_path = jsonl_path.parent_path() / meta.value("initial_states_file", initial_states_path(jsonl_path).filename().string());
  std::ifstream init_in(init_path);
  if (!init_in) throw std::runtime_error("cannot read " + init_path.string());
  while (std::getline(init_in, line))
    if (!line.empty()) ds.initial_states.push_back(from_json_vector(json::parse(line)));
  ds.recompute_stats();
  ds.validate();
  return ds;
}

}  // namespace ampl
