#include "rhmlab/rhm.hpp"

#include <algorithm>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "rhmlab/errors.hpp"

namespace rhmlab::rhm {

namespace {

std::uint64_t sat_mul(std::uint64_t a, std::uint64_t b) {
  if (a == 0 || b == 0) return 0;
  if (a > std::numeric_limits<std::uint64_t>::max() / b) {
    return std::numeric_limits<std::uint64_t>::max();
  }
  return a * b;
}

std::uint64_t sat_pow(std::uint64_t base, std::uint64_t exp) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 0; i < exp; ++i) r = sat_mul(r, base);
  return r;
}

// Hashes a codeword; symbols are < 64 so a polynomial hash is collision-poor.
struct CodewordHash {
  std::size_t operator()(const std::vector<int>& w) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (int s : w) {
      h ^= static_cast<std::uint64_t>(s) + 1;
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

char symbol_char(int s) {
  return static_cast<char>(s < 10 ? '0' + s : 'a' + (s - 10));
}

int char_symbol(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'z') return c - 'a' + 10;
  return -1;
}

// Expands level l (1-based) of `d` from level l+1 using the choice indices.
void expand_level(const RuleBook& rb, Derivation& d, int l, std::span<const int> choices) {
  const int v = rb.params.v;
  const auto& parent = d.levels[l];
  auto& child = d.levels[l - 1];
  child.resize(parent.size() * 2);
  for (std::size_t i = 0; i < parent.size(); ++i) {
    const int pair = rb.expansions[l - 1][parent[i]][choices[i]];
    child[2 * i] = pair / v;
    child[2 * i + 1] = pair % v;
  }
}

void expand_below(const RuleBook& rb, Derivation& d, int from_level, Rng& rng) {
  // Rebuilds levels from_level-1 .. 1 from levels[from_level - 1].
  std::vector<int> choices;
  for (int l = from_level - 1; l >= 1; --l) {
    const auto& parent = d.levels[l];
    choices.resize(parent.size());
    for (auto& c : choices) c = static_cast<int>(rng.below(static_cast<std::size_t>(rb.params.m)));
    expand_level(rb, d, l, choices);
  }
}

void enumerate_from(const RuleBook& rb, Derivation& cur, int l, std::vector<Derivation>& out) {
  if (l == 0) {
    out.push_back(cur);
    return;
  }
  const std::size_t n = cur.levels[l].size();
  const int m = rb.params.m;
  std::vector<int> choices(n, 0);
  while (true) {
    expand_level(rb, cur, l, choices);
    enumerate_from(rb, cur, l - 1, out);
    std::size_t pos = n;
    while (pos > 0) {
      --pos;
      if (++choices[pos] < m) break;
      choices[pos] = 0;
      if (pos == 0) return;
    }
    if (n == 0) return;
  }
}

}  // namespace

void RhmParams::validate() const {
  if (L < 1 || L > 16) throw ParameterError("rhm: L must be in [1, 16]");
  if (v < 1) throw ParameterError("rhm: v must be >= 1");
  if (n_c < 1 || n_c > v) throw ParameterError("rhm: n_c must satisfy 1 <= n_c <= v");
  if (m < 1 || m > v) throw ParameterError("rhm: m must satisfy 1 <= m <= v");
}

std::uint64_t RhmParams::p_max() const {
  const std::uint64_t exponent = (std::uint64_t{1} << L) - 1;
  return sat_mul(static_cast<std::uint64_t>(n_c), sat_pow(static_cast<std::uint64_t>(m), exponent));
}

std::uint64_t RhmParams::d_star() const {
  return sat_mul(static_cast<std::uint64_t>(n_c),
                 sat_pow(static_cast<std::uint64_t>(v), static_cast<std::uint64_t>(L)));
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& d : samples) out.push_back(d.object());
  return out;
}

std::vector<int> Dataset::holdout_labels() const {
  std::vector<int> out;
  out.reserve(holdout.size());
  for (const auto& d : holdout) out.push_back(d.object());
  return out;
}

RuleBook build_rulebook(const RhmParams& params, Rng& rng) {
  params.validate();
  const int v = params.v;
  const int m = params.m;
  const int n_pairs = v * v;

  RuleBook rb;
  rb.params = params;
  rb.expansions.resize(static_cast<std::size_t>(params.L));
  rb.inverse.assign(static_cast<std::size_t>(params.L), std::vector<int>(n_pairs, -1));

  for (int l = params.L; l >= 1; --l) {
    const int parents = rb.features_at(l + 1);
    auto& table = rb.expansions[l - 1];
    table.assign(static_cast<std::size_t>(parents), {});
    if (params.maximal()) {
      std::vector<int> pairs(n_pairs);
      std::iota(pairs.begin(), pairs.end(), 0);
      rng.shuffle(pairs);
      for (int f = 0; f < parents; ++f) {
        table[f].assign(pairs.begin() + f * m, pairs.begin() + (f + 1) * m);
      }
    } else {
      // Uniform draw among still-unused pairs, equivalent to rejecting used ones.
      std::vector<int> unused(n_pairs);
      std::iota(unused.begin(), unused.end(), 0);
      for (int f = 0; f < parents; ++f) {
        for (int k = 0; k < m; ++k) {
          const std::size_t pick = rng.below(unused.size());
          table[f].push_back(unused[pick]);
          unused[pick] = unused.back();
          unused.pop_back();
        }
      }
    }
    for (int f = 0; f < parents; ++f) {
      for (int pair : table[f]) rb.inverse[l - 1][pair] = f;
    }
  }
  return rb;
}

RuleBook build_rulebook(const RhmParams& params) {
  Rng rng(params.seed);
  return build_rulebook(params, rng);
}

Derivation encode(const RuleBook& rb, int object, Rng& rng) {
  if (object < 0 || object >= rb.params.n_c) {
    throw ParameterError("encode: object label out of range");
  }
  Derivation d;
  d.levels.resize(static_cast<std::size_t>(rb.params.L) + 1);
  d.levels.back() = {object};
  expand_below(rb, d, rb.params.L + 1, rng);
  return d;
}

std::vector<int> decode_to_level(const RuleBook& rb, std::span<const int> codeword, int level) {
  const auto& p = rb.params;
  if (static_cast<int>(codeword.size()) != p.length()) {
    throw NotACodeword("decode: codeword length must be 2^L");
  }
  if (level < 1 || level > p.L + 1) throw ParameterError("decode: level out of range");
  std::vector<int> cur(codeword.begin(), codeword.end());
  for (int s : cur) {
    if (s < 0 || s >= p.v) throw NotACodeword("decode: symbol out of range");
  }
  for (int l = 1; l < level; ++l) {
    std::vector<int> up(cur.size() / 2);
    for (std::size_t i = 0; i < up.size(); ++i) {
      const int f = rb.inverse[l - 1][pack_pair(cur[2 * i], cur[2 * i + 1], p.v)];
      if (f < 0) throw NotACodeword("decode: pair has no inverse at level " + std::to_string(l));
      up[i] = f;
    }
    cur = std::move(up);
  }
  return cur;
}

int decode(const RuleBook& rb, std::span<const int> codeword) {
  return decode_to_level(rb, codeword, rb.params.L + 1).front();
}

Derivation derivation_of(const RuleBook& rb, std::span<const int> codeword) {
  Derivation d;
  d.levels.push_back(decode_to_level(rb, codeword, 1));
  for (int l = 2; l <= rb.params.L + 1; ++l) {
    d.levels.push_back(decode_to_level(rb, d.levels.front(), l));
  }
  return d;
}

Dataset enumerate_dataset(std::shared_ptr<const RuleBook> rb, std::uint64_t cap) {
  const std::uint64_t p_max = rb->params.p_max();
  if (p_max > cap) {
    throw CapExceeded("enumerate_dataset: P_max = " + std::to_string(p_max) +
                      " exceeds cap " + std::to_string(cap));
  }
  Dataset ds;
  ds.rulebook = rb;
  ds.samples.reserve(static_cast<std::size_t>(p_max));
  for (int o = 0; o < rb->params.n_c; ++o) {
    Derivation cur;
    cur.levels.resize(static_cast<std::size_t>(rb->params.L) + 1);
    cur.levels.back() = {o};
    enumerate_from(*rb, cur, rb->params.L, ds.samples);
  }
  return ds;
}

Dataset sample_training_set(std::shared_ptr<const RuleBook> rb, std::size_t P, Rng& rng,
                            std::size_t holdout_cap) {
  const std::uint64_t p_max = rb->params.p_max();
  if (P > p_max) {
    throw ParameterError("sample_training_set: P = " + std::to_string(P) + " exceeds P_max = " +
                         std::to_string(p_max));
  }
  const std::size_t n_holdout =
      static_cast<std::size_t>(std::min<std::uint64_t>(holdout_cap, p_max - P));
  const std::size_t total = P + n_holdout;

  Dataset ds;
  ds.rulebook = rb;

  // Near-exhaustive draws: enumerate and permute instead of rejection, which
  // degrades to coupon collection. Same distribution either way.
  constexpr std::uint64_t kEnumerateLimit = 4'000'000;
  if (p_max <= kEnumerateLimit && 2 * static_cast<std::uint64_t>(total) > p_max) {
    Dataset full = enumerate_dataset(rb, kEnumerateLimit);
    const auto order = rng.permutation(full.samples.size());
    ds.samples.reserve(P);
    ds.holdout.reserve(n_holdout);
    for (std::size_t i = 0; i < total; ++i) {
      auto& target = i < P ? ds.samples : ds.holdout;
      target.push_back(std::move(full.samples[order[i]]));
    }
    return ds;
  }

  std::unordered_set<std::vector<int>, CodewordHash> seen;
  seen.reserve(total * 2);
  ds.samples.reserve(P);
  ds.holdout.reserve(n_holdout);
  while (ds.samples.size() + ds.holdout.size() < total) {
    const int object = static_cast<int>(rng.below(static_cast<std::size_t>(rb->params.n_c)));
    Derivation d = encode(*rb, object, rng);
    if (!seen.insert(d.codeword()).second) continue;
    auto& target = ds.samples.size() < P ? ds.samples : ds.holdout;
    target.push_back(std::move(d));
  }
  return ds;
}

std::pair<Derivation, Derivation> sample_synonym_pair(const RuleBook& rb, int level, Rng& rng) {
  if (level < 1 || level > rb.params.L) {
    throw ParameterError("sample_synonym_pair: level must be in [1, L]");
  }
  const int object = static_cast<int>(rng.below(static_cast<std::size_t>(rb.params.n_c)));
  Derivation a = encode(rb, object, rng);
  Derivation b = a;
  expand_below(rb, b, level + 1, rng);
  return {std::move(a), std::move(b)};
}

Eigen::MatrixXd one_hot(std::span<const int> codeword, int v) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(v, static_cast<Eigen::Index>(codeword.size()));
  for (std::size_t i = 0; i < codeword.size(); ++i) x(codeword[i], static_cast<Eigen::Index>(i)) = 1.0;
  return x;
}

Eigen::MatrixXd encode_inputs(const std::vector<Derivation>& samples,
                              std::span<const std::size_t> indices, int v) {
  if (indices.empty()) return Eigen::MatrixXd(v, 0);
  const std::size_t d = samples[indices.front()].codeword().size();
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(v, static_cast<Eigen::Index>(indices.size() * d));
  for (std::size_t s = 0; s < indices.size(); ++s) {
    const auto& w = samples[indices[s]].codeword();
    for (std::size_t p = 0; p < d; ++p) x(w[p], static_cast<Eigen::Index>(s * d + p)) = 1.0;
  }
  return x;
}

Eigen::MatrixXd encode_inputs(const std::vector<Derivation>& samples, int v) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return encode_inputs(samples, all, v);
}

std::string to_string(NegativePolicy p) {
  return p == NegativePolicy::cross_object ? "cross_object" : "shuffled_all";
}

NegativePolicy negative_policy_from_string(const std::string& s) {
  if (s == "cross_object") return NegativePolicy::cross_object;
  if (s == "shuffled_all") return NegativePolicy::shuffled_all;
  throw ConfigError("unknown negative policy '" + s + "'");
}

std::vector<std::vector<std::size_t>> index_by_object(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_object(static_cast<std::size_t>(ds.rulebook->params.n_c));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    by_object[static_cast<std::size_t>(ds.samples[i].object())].push_back(i);
  }
  return by_object;
}

PairBatch make_pair_batch(const Dataset& ds, const std::vector<std::vector<std::size_t>>& by_object,
                          std::size_t batch_size, NegativePolicy policy, Rng& rng) {
  std::vector<std::size_t> eligible;
  for (std::size_t o = 0; o < by_object.size(); ++o) {
    if (by_object[o].size() >= 2) eligible.push_back(o);
  }
  if (eligible.empty()) {
    throw ParameterError("make_pair_batch: no object has two training encodings");
  }
  if (batch_size < 2) throw ParameterError("make_pair_batch: batch_size must be >= 2");

  // Fewer eligible objects than groups: fewer, larger groups.
  std::size_t n_groups = std::max<std::size_t>(1, batch_size / kGroupSize);
  n_groups = std::min(n_groups, eligible.size());
  n_groups = std::min(n_groups, batch_size / 2);
  rng.shuffle(eligible);

  PairBatch batch;
  batch.policy = policy;
  batch.groups.resize(n_groups);
  const std::size_t base = batch_size / n_groups;
  const std::size_t extra = batch_size % n_groups;

  std::size_t pos = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    const auto& pool = by_object[eligible[g]];
    auto& grp = batch.groups[g];
    grp.begin = pos;
    grp.end = pos + size;
    grp.object = static_cast<int>(eligible[g]);
    if (pool.size() >= size) {
      // Partial Fisher-Yates: `size` distinct encodings.
      std::vector<std::size_t> idx(pool.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      for (std::size_t i = 0; i < size; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        batch.sample_ids.push_back(pool[idx[i]]);
      }
    } else {
      for (std::size_t i = 0; i < size; ++i) batch.sample_ids.push_back(pool[rng.below(pool.size())]);
    }
    for (std::size_t i = 0; i < size; ++i) batch.object_ids.push_back(grp.object);
    pos += size;
  }

  // shuffled_all: the negatives are one permutation of the whole batch.
  std::vector<std::size_t> perm;
  if (policy == NegativePolicy::shuffled_all) perm = rng.permutation(batch_size);
  for (auto& grp : batch.groups) {
    grp.positives.resize(grp.size());
    std::iota(grp.positives.begin(), grp.positives.end(), grp.begin);
    rng.shuffle(grp.positives);

    if (policy == NegativePolicy::shuffled_all) {
      grp.negatives.assign(perm.begin() + static_cast<std::ptrdiff_t>(grp.begin),
                           perm.begin() + static_cast<std::ptrdiff_t>(grp.end));
      continue;
    }
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < batch_size; ++i) {
      if (i < grp.begin || i >= grp.end) candidates.push_back(i);
    }
    rng.shuffle(candidates);
    candidates.resize(std::min(candidates.size(), grp.size()));
    grp.negatives = std::move(candidates);
  }

  batch.inputs = encode_inputs(ds.samples, batch.sample_ids, ds.rulebook->params.v);
  return batch;
}

PairBatch make_pair_batch(const Dataset& ds, std::size_t batch_size, NegativePolicy policy,
                          Rng& rng) {
  return make_pair_batch(ds, index_by_object(ds), batch_size, policy, rng);
}

void to_json(nlohmann::json& j, const RhmParams& p) {
  j = nlohmann::json{{"L", p.L}, {"v", p.v}, {"m", p.m}, {"n_c", p.n_c}, {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, RhmParams& p) {
  j.at("L").get_to(p.L);
  j.at("v").get_to(p.v);
  j.at("m").get_to(p.m);
  j.at("n_c").get_to(p.n_c);
  p.seed = j.value("seed", std::uint64_t{0});
}

nlohmann::json rulebook_to_json(const RuleBook& rb) {
  nlohmann::json levels = nlohmann::json::array();
  for (int l = 1; l <= rb.params.L; ++l) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& syn : rb.expansions[l - 1]) {
      nlohmann::json pairs = nlohmann::json::array();
      for (int pr : syn) pairs.push_back({pr / rb.params.v, pr % rb.params.v});
      table.push_back(std::move(pairs));
    }
    levels.push_back({{"level", l}, {"rules", std::move(table)}});
  }
  return {{"params", rb.params}, {"levels", std::move(levels)}};
}

RuleBook rulebook_from_json(const nlohmann::json& j) {
  RuleBook rb;
  rb.params = j.at("params").get<RhmParams>();
  rb.params.validate();
  const int v = rb.params.v;
  const auto& levels = j.at("levels");
  if (static_cast<int>(levels.size()) != rb.params.L) {
    throw ConfigError("rulebook: expected " + std::to_string(rb.params.L) + " levels");
  }
  rb.expansions.resize(static_cast<std::size_t>(rb.params.L));
  rb.inverse.assign(static_cast<std::size_t>(rb.params.L), std::vector<int>(v * v, -1));
  for (const auto& lvl : levels) {
    const int l = lvl.at("level").get<int>();
    if (l < 1 || l > rb.params.L) throw ConfigError("rulebook: level index out of range");
    auto& table = rb.expansions[l - 1];
    for (const auto& syn : lvl.at("rules")) {
      std::vector<int> pairs;
      for (const auto& pr : syn) {
        const int a = pr.at(0).get<int>();
        const int b = pr.at(1).get<int>();
        if (a < 0 || a >= v || b < 0 || b >= v) throw ConfigError("rulebook: symbol out of range");
        pairs.push_back(pack_pair(a, b, v));
      }
      table.push_back(std::move(pairs));
    }
    if (static_cast<int>(table.size()) != rb.features_at(l + 1)) {
      throw ConfigError("rulebook: wrong number of features at level " + std::to_string(l + 1));
    }
    for (std::size_t f = 0; f < table.size(); ++f) {
      for (int pr : table[f]) {
        if (rb.inverse[l - 1][pr] >= 0) throw ConfigError("rulebook: pair assigned twice");
        rb.inverse[l - 1][pr] = static_cast<int>(f);
      }
    }
  }
  return rb;
}

void write_samples(std::ostream& os, const RhmParams& params, const std::vector<Derivation>& samples) {
  if (params.v > 36) throw ParameterError("write_samples: v > 36 has no single-character encoding");
  os << params.L << ' ' << params.v << ' ' << params.m << ' ' << params.n_c << ' ' << params.seed
     << '\n';
  std::string line;
  for (const auto& d : samples) {
    line = std::to_string(d.object());
    line += '\t';
    for (int s : d.codeword()) line += symbol_char(s);
    line += '\n';
    os << line;
  }
}

std::vector<Derivation> read_samples(std::istream& is, const RuleBook& rb) {
  std::string header;
  if (!std::getline(is, header)) throw ConfigError("read_samples: missing header");
  std::istringstream hs(header);
  RhmParams p;
  hs >> p.L >> p.v >> p.m >> p.n_c >> p.seed;
  if (!hs || !(p == rb.params)) throw ConfigError("read_samples: header does not match rulebook");

  std::vector<Derivation> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError("read_samples: malformed line");
    const int label = std::stoi(line.substr(0, tab));
    std::vector<int> w;
    for (char c : line.substr(tab + 1)) {
      const int s = char_symbol(c);
      if (s < 0) throw ConfigError("read_samples: bad codeword symbol");
      w.push_back(s);
    }
    Derivation d = derivation_of(rb, w);
    if (d.object() != label) throw ConfigError("read_samples: label does not match decoded object");
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace rhmlab::rhm
