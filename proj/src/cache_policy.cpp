#include "kvlab/cache_policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kvlab {

std::string to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::Full: return "full";
    case PolicyKind::Window: return "window";
    case PolicyKind::KeyOnly: return "key_only";
    case PolicyKind::AttentionSink: return "attention_sink";
    case PolicyKind::H2O: return "h2o";
    case PolicyKind::Damped: return "damped";
    case PolicyKind::Keyformer: return "keyformer";
  }
  throw std::logic_error("to_string: bad PolicyKind");
}

PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "full") return PolicyKind::Full;
  if (s == "window") return PolicyKind::Window;
  if (s == "key_only") return PolicyKind::KeyOnly;
  if (s == "attention_sink") return PolicyKind::AttentionSink;
  if (s == "h2o") return PolicyKind::H2O;
  if (s == "damped") return PolicyKind::Damped;
  if (s == "keyformer") return PolicyKind::Keyformer;
  throw std::invalid_argument(
      "unknown policy '" + s +
      "'; valid: full, window, key_only, attention_sink, h2o, damped, keyformer");
}

std::string to_string(PositionMode mode) {
  return mode == PositionMode::Renumbered ? "renumbered" : "original";
}

PositionMode position_mode_from_string(const std::string& s) {
  if (s == "original") return PositionMode::Original;
  if (s == "renumbered") return PositionMode::Renumbered;
  throw std::invalid_argument("unknown position mode '" + s + "'; valid: original, renumbered");
}

KvCache::KvCache(int budget, int window) : budget_(budget), window_(window) {
  if (budget_ < 0 && budget_ != kNoBudget)
    throw std::invalid_argument("KvCache: budget must be >= 0 or kNoBudget");
  if (budget_ >= 0 && (window_ < 0 || window_ > budget_))
    throw std::invalid_argument("KvCache: window must be in [0, budget]");
}

const CacheEntry& KvCache::entry(std::size_t i) const {
  if (i >= entries_.size()) throw std::logic_error("KvCache: entry index out of range");
  return entries_[i];
}

std::vector<SlotId> KvCache::positions() const {
  std::vector<SlotId> out;
  out.reserve(entries_.size());
  for (const CacheEntry& e : entries_) out.push_back(e.position);
  return out;
}

bool KvCache::contains(SlotId pos) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), pos,
                             [](const CacheEntry& e, SlotId p) { return e.position < p; });
  return it != entries_.end() && it->position == pos;
}

void KvCache::append(CacheEntry e) {
  if (e.position <= max_position())
    throw std::logic_error("KvCache: append position must exceed all cached positions");
  if (evicted_.count(e.position))
    throw std::logic_error("KvCache: position was evicted earlier and cannot return");
  if (!entries_.empty() &&
      (e.key.size() != entries_.front().key.size() ||
       e.value.size() != entries_.front().value.size()))
    throw std::logic_error("KvCache: key/value dimension mismatch");
  if (bounded() && !evicted_.empty() &&
      entries_.size() >= static_cast<std::size_t>(budget_) + 1)
    throw std::logic_error("KvCache: budget exceeded; evict before appending again");
  entries_.push_back(std::move(e));
}

std::vector<SlotId> KvCache::keep_only(std::span<const SlotId> kept) {
  if (kept.empty()) throw std::invalid_argument("KvCache: keep set must be nonempty");
  std::set<SlotId> keep(kept.begin(), kept.end());
  if (keep.size() != kept.size())
    throw std::invalid_argument("KvCache: duplicate position in keep set");
  for (SlotId pos : keep)
    if (!contains(pos)) throw std::invalid_argument("KvCache: keep set references uncached position");

  std::vector<CacheEntry> survivors;
  std::vector<SlotId> evicted;
  survivors.reserve(keep.size());
  for (CacheEntry& e : entries_) {
    if (keep.count(e.position)) {
      survivors.push_back(std::move(e));
    } else {
      evicted.push_back(e.position);
      evicted_.insert(e.position);
    }
  }
  entries_ = std::move(survivors);
  return evicted;
}

Eigen::MatrixXf KvCache::keys() const {
  if (entries_.empty()) return {};
  Eigen::MatrixXf m(static_cast<Eigen::Index>(entries_.size()), entries_.front().key.size());
  for (std::size_t i = 0; i < entries_.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = entries_[i].key.transpose();
  return m;
}

Eigen::MatrixXf KvCache::values() const {
  if (entries_.empty()) return {};
  Eigen::MatrixXf m(static_cast<Eigen::Index>(entries_.size()), entries_.front().value.size());
  for (std::size_t i = 0; i < entries_.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = entries_[i].value.transpose();
  return m;
}

AdjustmentStrategy default_adjustment(PolicyKind kind) {
  AdjustmentStrategy adj;
  if (kind == PolicyKind::Keyformer) {
    adj.noise = NoiseSpec::gumbel();
    adj.use_temperature = true;
  }
  return adj;
}

PolicySpec make_policy(PolicyKind kind) {
  PolicySpec spec;
  spec.kind = kind;
  spec.adjustment = default_adjustment(kind);
  return spec;
}

nlohmann::json to_json(const NoiseSpec& spec) {
  switch (spec.kind) {
    case NoiseKind::None: return {{"kind", "none"}};
    case NoiseKind::Constant: return {{"kind", "constant"}, {"c", spec.c}};
    case NoiseKind::Gaussian:
      return {{"kind", "gaussian"}, {"mu", spec.mu}, {"sigma", spec.sigma}};
    case NoiseKind::Gumbel: return {{"kind", "gumbel"}};
  }
  throw std::logic_error("to_json: bad NoiseKind");
}

NoiseSpec noise_from_json(const nlohmann::json& j) {
  std::string kind;
  if (j.is_string()) {
    kind = j.get<std::string>();
  } else if (j.is_object() && j.contains("kind") && j["kind"].is_string()) {
    kind = j["kind"].get<std::string>();
  } else {
    throw std::invalid_argument("noise: expected a kind string or an object with 'kind'");
  }
  auto num = [&](const char* key, double fallback) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    if (!j[key].is_number()) throw std::invalid_argument(std::string("noise: ") + key + " must be a number");
    return j[key].get<double>();
  };
  if (kind == "none") return NoiseSpec::none();
  if (kind == "constant") return NoiseSpec::constant(num("c", kConstantNoiseDefault));
  if (kind == "gaussian")
    return NoiseSpec::gaussian(num("mu", kGaussianMuDefault), num("sigma", kGaussianSigmaDefault));
  if (kind == "gumbel") return NoiseSpec::gumbel();
  throw std::invalid_argument("unknown noise '" + kind + "'; valid: none, constant, gaussian, gumbel");
}

nlohmann::json to_json(const PolicySpec& spec) {
  nlohmann::json j{{"kind", to_string(spec.kind)},
                   {"recent_ratio", spec.recent_ratio},
                   {"sinks", spec.sinks},
                   {"alpha", spec.alpha},
                   {"noise", to_json(spec.adjustment.noise)},
                   {"use_temperature", spec.adjustment.use_temperature},
                   {"tau_init", spec.tau_init},
                   {"tau_end", spec.tau_end},
                   {"scope", to_string(spec.scope)},
                   {"position_mode", to_string(spec.position_mode)}};
  if (spec.kv_pct) j["kv_pct"] = *spec.kv_pct;
  if (spec.k_abs) j["k_abs"] = *spec.k_abs;
  return j;
}

PolicySpec policy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("policy: expected a JSON object");
  if (!j.contains("kind") || !j["kind"].is_string())
    throw std::invalid_argument(
        "policy: missing 'kind'; valid: full, window, key_only, attention_sink, h2o, damped, "
        "keyformer");
  PolicySpec spec = make_policy(policy_kind_from_string(j["kind"].get<std::string>()));
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "kind") continue;
      else if (key == "kv_pct") spec.kv_pct = val.get<double>();
      else if (key == "k_abs") spec.k_abs = val.get<int>();
      else if (key == "recent_ratio") spec.recent_ratio = val.get<double>();
      else if (key == "sinks") spec.sinks = val.get<int>();
      else if (key == "alpha") spec.alpha = val.get<double>();
      else if (key == "noise") spec.adjustment.noise = noise_from_json(val);
      else if (key == "use_temperature") spec.adjustment.use_temperature = val.get<bool>();
      else if (key == "tau_init") spec.tau_init = val.get<double>();
      else if (key == "tau_end") spec.tau_end = val.get<double>();
      else if (key == "scope") spec.scope = scope_from_string(val.get<std::string>());
      else if (key == "position_mode")
        spec.position_mode = position_mode_from_string(val.get<std::string>());
      else throw std::invalid_argument("policy: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("policy: bad value for '" + key + "': " + e.what());
    }
  }
  return spec;
}

ResolvedPolicy resolve(const PolicySpec& spec, long prompt_len, int gen_len) {
  if (prompt_len < 1) throw std::invalid_argument("resolve: prompt length must be >= 1");
  if (gen_len < 0) throw std::invalid_argument("resolve: generation length must be >= 0");
  if (spec.kv_pct && spec.k_abs)
    throw std::invalid_argument("resolve: give kv_pct or k_abs, not both");
  if (spec.recent_ratio < 0.0 || spec.recent_ratio > 1.0 || !std::isfinite(spec.recent_ratio))
    throw std::invalid_argument("resolve: recent_ratio must be in [0, 1]");
  if (!(spec.alpha > 0.0) || spec.alpha > 1.0)
    throw std::invalid_argument("resolve: alpha must be in (0, 1]");
  if (spec.sinks < 1) throw std::invalid_argument("resolve: sinks must be >= 1");

  ResolvedPolicy r;
  r.kind = spec.kind;
  r.alpha = spec.kind == PolicyKind::Damped ? spec.alpha : 1.0;
  r.adjustment = spec.adjustment;
  r.scope = spec.scope;
  r.position_mode = spec.position_mode;
  r.tau = TauSchedule(spec.tau_init, spec.tau_end, gen_len);

  if (spec.kind == PolicyKind::Full) return r;  // unbounded, no window

  int k;
  if (spec.k_abs) {
    if (*spec.k_abs < 1) throw std::invalid_argument("resolve: k_abs must be >= 1");
    k = *spec.k_abs;
  } else {
    const double pct = spec.kv_pct.value_or(50.0);
    if (!(pct > 0.0) || pct > 100.0)
      throw std::invalid_argument("resolve: kv_pct must be in (0, 100]");
    k = static_cast<int>(std::floor(pct * static_cast<double>(prompt_len) / 100.0));
    if (k < 1) k = 1;
  }
  r.k = k;

  switch (spec.kind) {
    case PolicyKind::Window:
      r.w = k;
      break;
    case PolicyKind::KeyOnly:
      r.w = 0;
      break;
    case PolicyKind::AttentionSink:
      r.sinks = std::min(spec.sinks, k);
      r.w = k - r.sinks;
      break;
    case PolicyKind::H2O:
    case PolicyKind::Damped:
    case PolicyKind::Keyformer: {
      int w = static_cast<int>(std::floor(spec.recent_ratio * static_cast<double>(k)));
      r.w = std::clamp(w, 0, k);
      break;
    }
    case PolicyKind::Full:
      break;
  }
  return r;
}

std::vector<SlotId> select_keyformer(const ScoreAccumulator& scores,
                                     std::span<const SlotId> cache_order, int k, int w) {
  const auto m = static_cast<int>(cache_order.size());
  if (k < 1) throw std::invalid_argument("select_keyformer: k must be >= 1");
  if (w < 0 || w > k) throw std::invalid_argument("select_keyformer: w must be in [0, k]");
  if (k > m) throw std::invalid_argument("select_keyformer: k exceeds cache size");
  for (int i = 1; i < m; ++i)
    if (cache_order[i - 1] >= cache_order[i])
      throw std::invalid_argument("select_keyformer: cache order must be strictly ascending");

  std::vector<SlotId> kept(cache_order.end() - w, cache_order.end());
  if (k > w) {
    std::vector<SlotId> older(cache_order.begin(), cache_order.end() - w);
    // Highest score first; lower position wins a tie, so a tied old token
    // survives and the newer one goes.
    std::stable_sort(older.begin(), older.end(), [&](SlotId a, SlotId b) {
      const double sa = scores.score(a);
      const double sb = scores.score(b);
      if (sa != sb) return sa > sb;
      return a < b;
    });
    older.resize(static_cast<std::size_t>(k - w));
    kept.insert(kept.end(), older.begin(), older.end());
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

namespace {

const ScoreAccumulator& require_scores(const ScoreAccumulator* scores, PolicyKind kind) {
  if (!scores)
    throw std::logic_error("policy '" + to_string(kind) + "' needs score state");
  return *scores;
}

}  // namespace

std::vector<SlotId> policy_keep_set(const KvCache& cache, const ScoreAccumulator* scores,
                                    const ResolvedPolicy& policy) {
  const std::vector<SlotId> order = cache.positions();
  if (!policy.bounded() || cache.size() <= static_cast<std::size_t>(policy.k)) return order;

  const int k = policy.k;
  const auto m = static_cast<int>(order.size());
  switch (policy.kind) {
    case PolicyKind::Full:
      return order;
    case PolicyKind::Window:
      return {order.end() - k, order.end()};
    case PolicyKind::AttentionSink: {
      std::vector<SlotId> kept(order.begin(), order.begin() + policy.sinks);
      kept.insert(kept.end(), order.end() - (k - policy.sinks), order.end());
      return kept;
    }
    case PolicyKind::KeyOnly:
    case PolicyKind::H2O:
    case PolicyKind::Damped:
    case PolicyKind::Keyformer:
      return select_keyformer(require_scores(scores, policy.kind), order, k, std::min(policy.w, m));
  }
  throw std::logic_error("policy_keep_set: bad PolicyKind");
}

std::vector<SlotId> prompt_reduce(KvCache& cache, ScoreAccumulator* scores,
                                  const ResolvedPolicy& policy) {
  if (!policy.bounded() || cache.size() <= static_cast<std::size_t>(policy.k)) return {};
  const std::vector<SlotId> kept = policy_keep_set(cache, scores, policy);
  std::vector<SlotId> evicted = cache.keep_only(kept);
  if (scores) evict_from_state(*scores, evicted);
  return evicted;
}

SlotId step_evict(KvCache& cache, ScoreAccumulator* scores, const ResolvedPolicy& policy) {
  if (!policy.bounded()) throw std::logic_error("step_evict: policy has no budget");
  if (cache.size() != static_cast<std::size_t>(policy.k) + 1)
    throw std::logic_error("step_evict: cache must hold exactly k + 1 entries");
  const std::vector<SlotId> kept = policy_keep_set(cache, scores, policy);
  std::vector<SlotId> evicted = cache.keep_only(kept);
  if (evicted.size() != 1) throw std::logic_error("step_evict: expected exactly one victim");
  if (scores) evict_from_state(*scores, evicted);
  return evicted.front();
}

bool reduce_caches(std::vector<KvCache>& caches, ScoreBank& bank, const ResolvedPolicy& policy) {
  const int L = bank.layers();
  const int H = bank.heads();
  if (caches.size() != static_cast<std::size_t>(L) * H)
    throw std::logic_error("reduce_caches: cache count does not match score bank shape");
  if (!policy.bounded()) return false;

  if (policy.scope == ScoreScope::Shared) {
    const std::vector<SlotId> front = caches.front().positions();
    for (const KvCache& c : caches)
      if (c.positions() != front)
        throw std::logic_error("reduce_caches: shared scope requires identical cache contents");
    if (front.size() <= static_cast<std::size_t>(policy.k)) return false;
    ScoreAccumulator& shared = bank.at(0, 0);
    const std::vector<SlotId> kept =
        policy_keep_set(caches.front(), policy.scored() ? &shared : nullptr, policy);
    std::vector<SlotId> evicted;
    for (KvCache& c : caches) evicted = c.keep_only(kept);
    evict_from_state(shared, evicted);
    return true;
  }

  bool any = false;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      KvCache& c = caches[static_cast<std::size_t>(l) * H + h];
      if (!prompt_reduce(c, &bank.at(l, h), policy).empty()) any = true;
    }
  return any;
}

std::vector<long> position_ids(const KvCache& cache, PositionMode mode) {
  if (mode == PositionMode::Original) return cache.positions();
  std::vector<long> ids(cache.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<long>(i);
  return ids;
}

std::vector<std::size_t> policy_attention_mask(const ResolvedPolicy& policy,
                                               const KvCache& cache) {
  const std::size_t m = cache.size();
  std::size_t first = 0;
  if (policy.kind == PolicyKind::Window && policy.bounded() &&
      m > static_cast<std::size_t>(policy.w))
    first = m - static_cast<std::size_t>(policy.w);
  std::vector<std::size_t> idx;
  idx.reserve(m - first);
  for (std::size_t i = first; i < m; ++i) idx.push_back(i);
  return idx;
}

}  // namespace kvlab
