#include "kvlab/trace.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "kvlab/numerics.hpp"

namespace kvlab {

const std::vector<SlotId>& KeptTimeline::at(int t, int layer, int head) const {
  if (t < 0 || t >= step_count()) throw std::invalid_argument("KeptTimeline: step out of range");
  if (layer < 0 || layer >= layers || head < 0 || head >= heads)
    throw std::invalid_argument("KeptTimeline: layer/head out of range");
  return steps[static_cast<std::size_t>(t)][static_cast<std::size_t>(layer) * heads + head];
}

namespace {

double jaccard(const std::vector<SlotId>& a, const std::vector<SlotId>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) ++inter, ++i, ++j;
    else if (a[i] < b[j]) ++i;
    else ++j;
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

std::vector<double> overlap(const KeptTimeline& a, const KeptTimeline& b) {
  if (a.layers != b.layers || a.heads != b.heads || a.steps.size() != b.steps.size())
    throw std::invalid_argument("overlap: timeline shapes differ");
  if (a.steps.empty()) throw std::invalid_argument("overlap: empty timelines");
  std::vector<double> series;
  series.reserve(a.steps.size());
  for (std::size_t t = 0; t < a.steps.size(); ++t) {
    double sum = 0.0;
    for (std::size_t c = 0; c < a.steps[t].size(); ++c) sum += jaccard(a.steps[t][c], b.steps[t][c]);
    series.push_back(sum / static_cast<double>(a.steps[t].size()));
  }
  return series;
}

double mean_overlap(const KeptTimeline& a, const KeptTimeline& b) {
  const std::vector<double> series = overlap(a, b);
  double sum = 0.0;
  for (double v : series) sum += v;
  return sum / static_cast<double>(series.size());
}

int timeline_divergence(const KeptTimeline& a, const KeptTimeline& b) {
  if (a.layers != b.layers || a.heads != b.heads)
    throw std::invalid_argument("timeline_divergence: shapes differ");
  const std::size_t n = std::min(a.steps.size(), b.steps.size());
  for (std::size_t t = 0; t < n; ++t)
    if (a.steps[t] != b.steps[t]) return static_cast<int>(t);
  if (a.steps.size() != b.steps.size()) return static_cast<int>(n);
  return -1;
}

int divergence_step(std::span<const int> a, std::span<const int> b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i)
    if (a[i] != b[i]) return static_cast<int>(i);
  return -1;
}

void validate_timeline(const KeptTimeline& tl, long prompt_len, int k, int w) {
  if (prompt_len < 1) throw std::invalid_argument("validate_timeline: prompt_len must be >= 1");
  if (tl.steps.empty()) throw std::invalid_argument("validate_timeline: no steps");
  if (k >= 0 && (w < 0 || w > k))
    throw std::invalid_argument("validate_timeline: w must lie in [0, k]");
  const std::size_t cells = static_cast<std::size_t>(tl.layers) * tl.heads;

  for (std::size_t c = 0; c < cells; ++c) {
    std::vector<SlotId> prev;  // available set of the previous step
    for (std::size_t t = 0; t < tl.steps.size(); ++t) {
      if (tl.steps[t].size() != cells)
        throw std::invalid_argument("validate_timeline: ragged step at t=" + std::to_string(t));
      const std::vector<SlotId>& kept = tl.steps[t][c];
      for (std::size_t i = 1; i < kept.size(); ++i)
        if (kept[i - 1] >= kept[i])
          throw std::invalid_argument("validate_timeline: kept set not strictly ascending at t=" +
                                      std::to_string(t));

      // Positions on offer this step: the whole prompt at t=0, afterwards
      // the survivors plus the one new token.
      std::vector<SlotId> avail;
      if (t == 0) {
        avail.resize(static_cast<std::size_t>(prompt_len));
        for (long i = 0; i < prompt_len; ++i) avail[static_cast<std::size_t>(i)] = i;
      } else {
        avail = prev;
        avail.push_back(prompt_len + static_cast<long>(t) - 1);
      }

      if (!std::includes(avail.begin(), avail.end(), kept.begin(), kept.end()))
        throw std::invalid_argument(
            "validate_timeline: kept set resurrects or invents a position at t=" +
            std::to_string(t));

      const std::size_t expect =
          k < 0 ? avail.size() : std::min(avail.size(), static_cast<std::size_t>(k));
      if (kept.size() != expect)
        throw std::invalid_argument("validate_timeline: budget violated at t=" +
                                    std::to_string(t));

      if (k >= 0) {
        const std::size_t recent = std::min(static_cast<std::size_t>(w), avail.size());
        for (std::size_t i = 0; i < recent; ++i) {
          const SlotId want = avail[avail.size() - 1 - i];
          if (!std::binary_search(kept.begin(), kept.end(), want))
            throw std::invalid_argument("validate_timeline: recent window violated at t=" +
                                        std::to_string(t));
        }
      }
      prev = kept;
    }
  }
}

void write_trace(const AttentionTrace& trace, std::ostream& os) {
  const TraceHeader& h = trace.header;
  nlohmann::json hj{{"version", h.version},
                    {"config_hash", h.config_hash},
                    {"layers", h.layers},
                    {"heads", h.heads},
                    {"prompt_len", h.prompt_len},
                    {"gen_len", h.gen_len},
                    {"weight_seed", h.weight_seed},
                    {"noise_seed", h.noise_seed},
                    {"policy", h.policy},
                    {"records", trace.records.size()}};
  os << hj.dump() << '\n';

  char buf[64];
  for (const TraceRecord& r : trace.records) {
    if (r.slots.size() != r.logits.size())
      throw std::logic_error("write_trace: slot/logit length mismatch");
    os << "{\"t\":" << r.t << ",\"layer\":" << r.layer << ",\"head\":" << r.head
       << ",\"q_pos\":" << r.q_pos << ",\"slots\":[";
    for (std::size_t i = 0; i < r.slots.size(); ++i) {
      if (i) os << ',';
      os << r.slots[i];
    }
    os << "],\"logits\":[";
    for (std::size_t i = 0; i < r.logits.size(); ++i) {
      if (!std::isfinite(r.logits[i])) throw std::logic_error("write_trace: non-finite logit");
      std::snprintf(buf, sizeof buf, "%.17g", r.logits[i]);
      if (i) os << ',';
      os << buf;
    }
    os << "]}\n";
  }
  if (!os) throw std::runtime_error("write_trace: stream write failed");
}

void write_trace_file(const AttentionTrace& trace, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_trace: cannot open " + path);
  write_trace(trace, os);
}

namespace {

void validate_records(const AttentionTrace& tr) {
  const TraceHeader& h = tr.header;
  long last_t = -1, last_l = -1, last_h = -1, last_q = -1;
  // Per (layer, head): last slot list, to check legal cache evolution.
  std::vector<std::vector<SlotId>> last_slots(static_cast<std::size_t>(h.layers) * h.heads);

  for (std::size_t i = 0; i < tr.records.size(); ++i) {
    const TraceRecord& r = tr.records[i];
    const std::string where = " (record " + std::to_string(i + 1) + ")";
    if (r.t < 0 || r.t > h.gen_len) throw std::runtime_error("trace: step out of range" + where);
    if (r.layer < 0 || r.layer >= h.layers || r.head < 0 || r.head >= h.heads)
      throw std::runtime_error("trace: layer/head out of range" + where);
    if (r.slots.empty() || r.slots.size() != r.logits.size())
      throw std::runtime_error("trace: slot/logit length mismatch" + where);
    for (std::size_t j = 1; j < r.slots.size(); ++j)
      if (r.slots[j - 1] >= r.slots[j])
        throw std::runtime_error("trace: slots not strictly ascending" + where);
    if (r.q_pos != r.slots.back())
      throw std::runtime_error("trace: query is not the newest cached slot" + where);
    for (double v : r.logits)
      if (!std::isfinite(v)) throw std::runtime_error("trace: non-finite logit" + where);

    const auto tuple = std::array<long, 4>{r.t, r.layer, r.head, r.q_pos};
    const auto prev = std::array<long, 4>{last_t, last_l, last_h, last_q};
    if (tuple <= prev) throw std::runtime_error("trace: records out of order" + where);
    if (r.t >= 1 && r.t == last_t && r.layer == last_l && r.head == last_h)
      throw std::runtime_error("trace: duplicate generation record for a layer/head" + where);
    last_t = r.t;
    last_l = r.layer;
    last_h = r.head;
    last_q = r.q_pos;

    // Evolution legality: a row may drop slots and add only its own query.
    std::vector<SlotId>& prev_slots = last_slots[static_cast<std::size_t>(r.layer) * h.heads + r.head];
    if (!prev_slots.empty()) {
      for (SlotId s : r.slots)
        if (s != r.q_pos && !std::binary_search(prev_slots.begin(), prev_slots.end(), s))
          throw std::runtime_error("trace: slot appears from nowhere" + where);
      if (r.q_pos <= prev_slots.back())
        throw std::runtime_error("trace: query position does not advance" + where);
    }
    prev_slots = r.slots;
  }
}

}  // namespace

AttentionTrace read_trace(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("trace: empty stream");
  AttentionTrace tr;
  std::size_t expected = 0;
  try {
    const nlohmann::json hj = nlohmann::json::parse(line);
    TraceHeader& h = tr.header;
    h.version = hj.at("version").get<int>();
    h.config_hash = hj.at("config_hash").get<std::uint64_t>();
    h.layers = hj.at("layers").get<int>();
    h.heads = hj.at("heads").get<int>();
    h.prompt_len = hj.at("prompt_len").get<long>();
    h.gen_len = hj.at("gen_len").get<int>();
    h.weight_seed = hj.at("weight_seed").get<std::uint64_t>();
    h.noise_seed = hj.at("noise_seed").get<std::uint64_t>();
    h.policy = hj.at("policy");
    expected = hj.at("records").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("trace: bad header (line 1): ") + e.what());
  }
  if (tr.header.version != 1)
    throw std::runtime_error("trace: unsupported version " + std::to_string(tr.header.version));
  if (tr.header.layers < 1 || tr.header.heads < 1 || tr.header.prompt_len < 1 ||
      tr.header.gen_len < 0)
    throw std::runtime_error("trace: header shape invalid");

  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    TraceRecord r;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      r.t = j.at("t").get<int>();
      r.layer = j.at("layer").get<int>();
      r.head = j.at("head").get<int>();
      r.q_pos = j.at("q_pos").get<long>();
      r.slots = j.at("slots").get<std::vector<SlotId>>();
      r.logits = j.at("logits").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("trace: malformed record (line " + std::to_string(lineno) +
                               "): " + e.what());
    }
    tr.records.push_back(std::move(r));
  }
  if (tr.records.size() != expected)
    throw std::runtime_error("trace: truncated or padded: header says " +
                             std::to_string(expected) + " records, found " +
                             std::to_string(tr.records.size()));
  validate_records(tr);
  return tr;
}

AttentionTrace read_trace_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_trace: cannot open " + path);
  return read_trace(is);
}

KeptTimeline replay(const AttentionTrace& trace, const PolicySpec& spec) {
  const TraceHeader& h = trace.header;
  if (trace.records.empty()) throw std::runtime_error("replay: trace has no records");
  const int L = h.layers, H = h.heads;
  const ResolvedPolicy policy = resolve(spec, h.prompt_len, h.gen_len);

  // Virtual caches hold positions only; keys and values stay empty because
  // selection never reads them.
  std::vector<KvCache> caches(static_cast<std::size_t>(L) * H, KvCache(policy.k, policy.w));
  ScoreBank bank(policy.scope, L, H);
  const RngStream root(h.noise_seed);
  std::vector<RngStream> noise;
  noise.reserve(caches.size());
  for (std::size_t i = 0; i < caches.size(); ++i) noise.push_back(root.derive(i));

  KeptTimeline tl;
  tl.layers = L;
  tl.heads = H;
  const bool scored = policy.scored();
  const bool shared = policy.scope == ScoreScope::Shared;

  // Shared scope merges per query row within t=0 and per step afterwards,
  // in (layer, head) order, exactly as the live decoder does.
  std::vector<std::vector<StepUpdate>> prompt_updates;
  if (scored && shared) prompt_updates.resize(static_cast<std::size_t>(h.prompt_len));
  std::vector<StepUpdate> step_updates;

  auto snapshot = [&]() {
    std::vector<std::vector<SlotId>> cells;
    cells.reserve(caches.size());
    for (const KvCache& c : caches) cells.push_back(c.positions());
    tl.steps.push_back(std::move(cells));
  };

  auto finalize_step = [&](int t) {
    if (scored && shared) {
      ScoreAccumulator& acc = bank.at(0, 0);
      if (t == 0) {
        for (const auto& updates : prompt_updates)
          if (!updates.empty()) {
            const StepUpdate merged = merge_shared(updates);
            acc.accumulate(merged.slots, merged.mass);
          }
      } else if (!step_updates.empty()) {
        const StepUpdate merged = merge_shared(step_updates);
        acc.accumulate(merged.slots, merged.mass);
        step_updates.clear();
      }
    }
    reduce_caches(caches, bank, policy);
    bank.set_step(t);
    snapshot();
  };

  int cur_t = 0;
  for (const TraceRecord& r : trace.records) {
    if (r.t != cur_t) {
      if (r.t != cur_t + 1)
        throw std::runtime_error("replay: trace skips step " + std::to_string(cur_t + 1));
      finalize_step(cur_t);
      cur_t = r.t;
    }
    const std::size_t cell = static_cast<std::size_t>(r.layer) * H + r.head;
    KvCache& cache = caches[cell];
    ScoreAccumulator& acc = bank.at(r.layer, r.head);
    if (cache.max_position() < r.q_pos) {
      cache.append({r.q_pos, 0, {}, {}});
      if (!acc.has_slot(r.q_pos)) acc.add_slot(r.q_pos);
    }

    // Restrict the recorded row to what the simulated cache still holds.
    // Both lists are ascending; a cache slot missing from the record means
    // the trace was taken under a narrower policy than the one replayed,
    // and any timeline built from it would be fiction.  The coverage check
    // applies to every policy, scored or not.
    const std::vector<SlotId> pos = cache.positions();
    Eigen::VectorXd x(static_cast<Eigen::Index>(pos.size()));
    std::size_t j = 0;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      while (j < r.slots.size() && r.slots[j] < pos[i]) ++j;
      if (j == r.slots.size() || r.slots[j] != pos[i])
        throw std::runtime_error(
            "replay: trace lacks logits for cached position " + std::to_string(pos[i]) +
            " at step " + std::to_string(r.t) +
            "; traces recorded under a reduced policy can only replay that policy");
      x[static_cast<Eigen::Index>(i)] = r.logits[j];
    }

    if (!scored) continue;

    Eigen::VectorXd mass =
        keyformer_mass(x, policy.tau_for_step(r.t), policy.adjustment.noise, noise[cell]);
    if (policy.alpha != 1.0) mass = damp(mass, policy.alpha);
    if (shared) {
      StepUpdate u{pos, std::move(mass)};
      if (r.t == 0)
        prompt_updates[static_cast<std::size_t>(r.q_pos)].push_back(std::move(u));
      else
        step_updates.push_back(std::move(u));
    } else {
      acc.accumulate(pos, mass);
    }
  }
  finalize_step(cur_t);

  if (cur_t != h.gen_len)
    throw std::runtime_error("replay: trace ends at step " + std::to_string(cur_t) +
                             " but header promises " + std::to_string(h.gen_len));
  return tl;
}

std::string timeline_to_csv(const KeptTimeline& tl) {
  std::ostringstream os;
  os << "t,layer,head,kept\n";
  for (int t = 0; t < tl.step_count(); ++t)
    for (int l = 0; l < tl.layers; ++l)
      for (int h = 0; h < tl.heads; ++h) {
        os << t << ',' << l << ',' << h << ',';
        const std::vector<SlotId>& kept = tl.at(t, l, h);
        for (std::size_t i = 0; i < kept.size(); ++i) {
          if (i) os << ';';
          os << kept[i];
        }
        os << '\n';
      }
  return os.str();
}

}  // namespace kvlab
