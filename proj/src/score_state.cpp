#include "kvlab/score_state.hpp"

#include <stdexcept>

namespace kvlab {

std::string to_string(ScoreScope scope) {
  return scope == ScoreScope::Shared ? "shared" : "per_layer_head";
}

ScoreScope scope_from_string(const std::string& s) {
  if (s == "shared") return ScoreScope::Shared;
  if (s == "per_layer_head") return ScoreScope::PerLayerHead;
  throw std::invalid_argument("unknown score scope: " + s);
}

void ScoreAccumulator::add_slot(SlotId id) {
  if (evicted_.count(id))
    throw std::logic_error("ScoreAccumulator: slot was evicted earlier and cannot return");
  if (!scores_.emplace(id, 0.0).second)
    throw std::logic_error("ScoreAccumulator: slot already tracked");
}

double ScoreAccumulator::score(SlotId id) const {
  auto it = scores_.find(id);
  if (it != scores_.end()) return it->second;
  if (evicted_.count(id)) throw std::logic_error("ScoreAccumulator: querying an evicted slot");
  return 0.0;
}

std::vector<SlotId> ScoreAccumulator::slots() const {
  std::vector<SlotId> out;
  out.reserve(scores_.size());
  for (const auto& [id, _] : scores_) out.push_back(id);
  return out;
}

void ScoreAccumulator::set_step(int t) {
  if (t < 0) throw std::invalid_argument("ScoreAccumulator: step must be >= 0");
  t_ = t;
}

void ScoreAccumulator::accumulate(std::span<const SlotId> slots, const Eigen::VectorXd& mass) {
  if (static_cast<Eigen::Index>(slots.size()) != mass.size())
    throw std::logic_error("ScoreAccumulator: slot list and mass length mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!scores_.count(slots[i]))
      throw std::logic_error("ScoreAccumulator: increment references untracked slot");
    for (std::size_t j = i + 1; j < slots.size(); ++j)
      if (slots[i] == slots[j])
        throw std::logic_error("ScoreAccumulator: duplicate slot in increment");
  }
  for (std::size_t i = 0; i < slots.size(); ++i)
    scores_[slots[i]] += mass[static_cast<Eigen::Index>(i)];
}

void ScoreAccumulator::evict(std::span<const SlotId> ids) {
  for (SlotId id : ids)
    if (!scores_.count(id)) throw std::logic_error("ScoreAccumulator: evicting unknown slot");
  for (SlotId id : ids) {
    scores_.erase(id);
    evicted_.insert(id);
  }
}

nlohmann::json ScoreAccumulator::snapshot() const {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [id, s] : scores_) scores[std::to_string(id)] = s;
  nlohmann::json evicted = nlohmann::json::array();
  for (SlotId id : evicted_) evicted.push_back(id);
  return {{"t", t_}, {"scope", to_string(scope_)}, {"scores", scores}, {"evicted", evicted}};
}

ScoreAccumulator ScoreAccumulator::from_snapshot(const nlohmann::json& j) {
  ScoreAccumulator acc;
  try {
    acc.t_ = j.at("t").get<int>();
    acc.scope_ = scope_from_string(j.at("scope").get<std::string>());
    for (const auto& [key, val] : j.at("scores").items())
      acc.scores_[std::stol(key)] = val.get<double>();
    for (const auto& id : j.at("evicted")) acc.evicted_.insert(id.get<SlotId>());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("score snapshot: ") + e.what());
  }
  return acc;
}

Eigen::VectorXd adjust_logits(const Eigen::VectorXd& x, const AdjustmentStrategy& strategy,
                              RngStream& rng) {
  if (x.size() == 0) throw std::invalid_argument("adjust_logits: empty logits");
  if (strategy.noise.kind == NoiseKind::None) return x;
  return x + sample_noise(strategy.noise, x.size(), rng);
}

Eigen::VectorXd keyformer_mass(const Eigen::VectorXd& logits, double tau,
                               const NoiseSpec& noise, RngStream& rng) {
  AdjustmentStrategy strategy;
  strategy.noise = noise;
  return tempered_softmax(adjust_logits(logits, strategy, rng), tau);
}

void keyformer_increment(ScoreAccumulator& acc, std::span<const SlotId> slots,
                         const Eigen::VectorXd& logits, double tau,
                         const NoiseSpec& noise, RngStream& rng) {
  acc.accumulate(slots, keyformer_mass(logits, tau, noise, rng));
}

void accattn_increment(ScoreAccumulator& acc, std::span<const SlotId> slots,
                       const Eigen::VectorXd& probs) {
  if (probs.size() > 0 && (probs.minCoeff() < 0.0 || std::abs(probs.sum() - 1.0) > 1e-6))
    throw std::logic_error("accattn_increment: not a probability vector");
  acc.accumulate(slots, probs);
}

StepUpdate merge_shared(std::span<const StepUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("merge_shared: no updates");
  StepUpdate out;
  out.slots = updates[0].slots;
  out.mass = Eigen::VectorXd::Zero(updates[0].mass.size());
  for (const StepUpdate& u : updates) {
    if (u.slots != out.slots || u.mass.size() != out.mass.size())
      throw std::logic_error("merge_shared: updates cover different slot lists");
    out.mass += u.mass;
  }
  return out;
}

void evict_from_state(ScoreAccumulator& acc, std::span<const SlotId> evicted) {
  acc.evict(evicted);
}

ScoreBank::ScoreBank(ScoreScope scope, int layers, int heads)
    : scope_(scope), layers_(layers), heads_(heads) {
  if (layers <= 0 || heads <= 0)
    throw std::invalid_argument("ScoreBank: layers and heads must be positive");
  accs_.assign(scope == ScoreScope::Shared ? 1 : static_cast<std::size_t>(layers) * heads,
               ScoreAccumulator(scope));
}

std::size_t ScoreBank::index(int layer, int head) const {
  if (layer < 0 || layer >= layers_ || head < 0 || head >= heads_)
    throw std::invalid_argument("ScoreBank: layer/head out of range");
  if (scope_ == ScoreScope::Shared) return 0;
  return static_cast<std::size_t>(layer) * heads_ + head;
}

ScoreAccumulator& ScoreBank::at(int layer, int head) { return accs_[index(layer, head)]; }

const ScoreAccumulator& ScoreBank::at(int layer, int head) const {
  return accs_[index(layer, head)];
}

void ScoreBank::set_step(int t) {
  for (ScoreAccumulator& a : accs_) a.set_step(t);
}

nlohmann::json ScoreBank::snapshot() const {
  nlohmann::json accs = nlohmann::json::array();
  for (const ScoreAccumulator& a : accs_) accs.push_back(a.snapshot());
  return {{"scope", to_string(scope_)},
          {"layers", layers_},
          {"heads", heads_},
          {"accumulators", accs}};
}

ScoreBank ScoreBank::from_snapshot(const nlohmann::json& j) {
  ScoreBank bank;
  try {
    bank.scope_ = scope_from_string(j.at("scope").get<std::string>());
    bank.layers_ = j.at("layers").get<int>();
    bank.heads_ = j.at("heads").get<int>();
    for (const auto& a : j.at("accumulators"))
      bank.accs_.push_back(ScoreAccumulator::from_snapshot(a));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("score bank snapshot: ") + e.what());
  }
  const std::size_t expect = bank.scope_ == ScoreScope::Shared
                                 ? 1
                                 : static_cast<std::size_t>(bank.layers_) * bank.heads_;
  if (bank.layers_ <= 0 || bank.heads_ <= 0 || bank.accs_.size() != expect)
    throw std::runtime_error("score bank snapshot: inconsistent shape");
  return bank;
}

}  // namespace kvlab
