#pragma once

// Bit-width allocation across cache blocks: pick one width per block so the
// summed sensitivity score is minimal subject to a byte budget. This is the
// multiple-choice knapsack; instances here are small enough for exact
// answers, so nothing in this header approximates.
//
// Tie-break order everywhere: objective, then total bytes, then the
// lexicographically lowest width vector by block index. Comparisons are
// exact, so callers that want reproducible ties should feed scores that are
// exactly representable (the profiler's sums of absolute values are fine in
// practice; the test oracles use integer-valued scores).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <vector>

#include "json.hpp"
#include "pqkv/error.hpp"
#include "pqkv/quant.hpp"
#include "pqkv/sensitivity.hpp"

namespace pqkv {

struct AllocationPlan {
  std::vector<BitWidth> choice;  // one width per block
  double objective = 0.0;
  std::uint64_t bytes_used = 0;
  std::uint64_t budget = 0;
};

inline nlohmann::json allocation_plan_to_json(const AllocationPlan& p) {
  nlohmann::json widths = nlohmann::json::array();
  for (BitWidth w : p.choice) widths.push_back(bits(w));
  return nlohmann::json{{"choice", widths},
                        {"objective", p.objective},
                        {"bytes_used", p.bytes_used},
                        {"budget", p.budget}};
}

inline AllocationPlan allocation_plan_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("allocation plan must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "choice" && it.key() != "objective" && it.key() != "bytes_used" &&
        it.key() != "budget")
      throw FormatError("unknown allocation plan key: " + it.key());
  }
  AllocationPlan p;
  for (unsigned b : j.at("choice").get<std::vector<unsigned>>())
    p.choice.push_back(bitwidth_from_int(int(b)));
  p.objective = j.at("objective").get<double>();
  p.bytes_used = j.at("bytes_used").get<std::uint64_t>();
  p.budget = j.at("budget").get<std::uint64_t>();
  if (p.bytes_used > p.budget) throw FormatError("allocation plan exceeds its own budget");
  return p;
}

namespace detail {

// Canonical reporting fold shared by both solvers, so the same choice vector
// always serializes to the same objective regardless of which path found it.
inline AllocationPlan finish_plan(const SensitivityTable& t,
                                  const std::vector<std::size_t>& pick,
                                  std::uint64_t budget) {
  AllocationPlan p;
  p.budget = budget;
  for (std::size_t i = 0; i < pick.size(); ++i) {
    p.choice.push_back(t.options[pick[i]]);
    p.objective += t.s[i][pick[i]];
    p.bytes_used += t.mem[i][pick[i]];
  }
  return p;
}

inline void check_feasible(const SensitivityTable& t, std::uint64_t budget) {
  std::uint64_t floor_bytes = 0;
  for (const auto& row : t.mem) floor_bytes += *std::min_element(row.begin(), row.end());
  if (floor_bytes > budget) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "budget of %llu bytes is below the %llu byte floor of the narrowest plan",
                  (unsigned long long)budget, (unsigned long long)floor_bytes);
    throw InfeasibleError(msg, floor_bytes);
  }
}

struct PickCmp {
  // Full plan order: (objective, bytes, widths lexicographic).
  static bool better(double o1, std::uint64_t b1, const std::vector<std::size_t>& p1,
                     double o2, std::uint64_t b2, const std::vector<std::size_t>& p2) {
    if (o1 != o2) return o1 < o2;
    if (b1 != b2) return b1 < b2;
    return p1 < p2;
  }
};

// Exact DP over slack measured in gcd units. Rolling value rows plus a full
// pointer table; the pointer at each cell is the narrowest width that attains
// the cell's optimum, which makes the reconstruction lexicographically
// minimal among optimal plans.
inline bool solve_dp(const SensitivityTable& t, std::uint64_t budget, AllocationPlan& out) {
  const std::size_t n = t.blocks(), m = t.options.size();
  std::vector<std::uint64_t> delta(n * m);
  std::uint64_t base = 0, g = 0, max_extra = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t lo = *std::min_element(t.mem[i].begin(), t.mem[i].end());
    base += lo;
    std::uint64_t widest = 0;
    for (std::size_t j = 0; j < m; ++j) {
      std::uint64_t d = t.mem[i][j] - lo;
      delta[i * m + j] = d;
      g = std::gcd(g, d);
      widest = std::max(widest, d);
    }
    max_extra += widest;
  }

  std::uint64_t slack = std::min(budget - base, max_extra);
  if (g == 0) {  // one option per block; the choice is forced
    out = finish_plan(t, std::vector<std::size_t>(n, 0), budget);
    return true;
  }

  std::uint64_t units64 = slack / g;
  if (units64 > (1ull << 22)) return false;
  std::size_t units = std::size_t(units64);
  if (n * (units + 1) > 60'000'000ull) return false;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> next_obj(units + 1, 0.0), cur_obj(units + 1);
  std::vector<std::uint64_t> next_spent(units + 1, 0), cur_spent(units + 1);
  std::vector<std::uint8_t> ptr(n * (units + 1));

  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t u = 0; u <= units; ++u) {
      double best_o = kInf;
      std::uint64_t best_b = 0;
      std::uint8_t best_j = 0;
      for (std::size_t j = 0; j < m; ++j) {
        std::uint64_t du = delta[i * m + j] / g;
        if (du > u) continue;
        double o = t.s[i][j] + next_obj[u - du];
        std::uint64_t b = t.mem[i][j] + next_spent[u - du];
        if (o < best_o || (o == best_o && b < best_b)) {
          best_o = o;
          best_b = b;
          best_j = std::uint8_t(j);
        }
      }
      cur_obj[u] = best_o;
      cur_spent[u] = best_b;
      ptr[i * (units + 1) + u] = best_j;
    }
    std::swap(cur_obj, next_obj);
    std::swap(cur_spent, next_spent);
  }

  std::vector<std::size_t> pick(n);
  std::size_t u = units;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = ptr[i * (units + 1) + u];
    pick[i] = j;
    u -= std::size_t(delta[i * m + j] / g);
  }
  out = finish_plan(t, pick, budget);
  return true;
}

// Per-block efficient frontier segments for the fractional relaxation bound.
struct HullStep {
  std::size_t block;
  std::uint64_t dm;
  double ds;     // negative: objective drop bought by dm bytes
  double ratio;  // -ds / dm
};

struct BnbContext {
  const SensitivityTable* t;
  std::uint64_t budget;
  std::vector<double> start_s;          // per block: score at its cheapest option
  std::vector<std::uint64_t> start_m;   // per block: cheapest option bytes
  std::vector<double> suffix_start_s;   // sums over blocks i..n-1
  std::vector<std::uint64_t> suffix_start_m;
  std::vector<HullStep> steps;          // globally sorted by descending ratio

  double best_obj = std::numeric_limits<double>::infinity();
  std::uint64_t best_bytes = 0;
  std::vector<std::size_t> best_pick, pick;
};

inline double bnb_bound(const BnbContext& c, std::size_t i, double obj, std::uint64_t used) {
  double lb = obj + c.suffix_start_s[i];
  std::uint64_t need = used + c.suffix_start_m[i];
  if (need > c.budget) return std::numeric_limits<double>::infinity();
  std::uint64_t slack = c.budget - need;
  for (const HullStep& h : c.steps) {
    if (h.block < i || slack == 0) continue;
    if (h.dm <= slack) {
      slack -= h.dm;
      lb += h.ds;
    } else {
      lb += h.ds * (double(slack) / double(h.dm));
      break;
    }
  }
  return lb;
}

inline void bnb_search(BnbContext& c, std::size_t i, double obj, std::uint64_t used) {
  const SensitivityTable& t = *c.t;
  if (i == t.blocks()) {
    if (PickCmp::better(obj, used, c.pick, c.best_obj, c.best_bytes, c.best_pick)) {
      c.best_obj = obj;
      c.best_bytes = used;
      c.best_pick = c.pick;
    }
    return;
  }
  if (bnb_bound(c, i, obj, used) > c.best_obj) return;
  for (std::size_t j = 0; j < t.options.size(); ++j) {
    std::uint64_t nu = used + t.mem[i][j];
    if (nu + c.suffix_start_m[i + 1] > c.budget) continue;
    c.pick.push_back(j);
    bnb_search(c, i + 1, obj + t.s[i][j], nu);
    c.pick.pop_back();
  }
}

inline AllocationPlan solve_bnb(const SensitivityTable& t, std::uint64_t budget) {
  const std::size_t n = t.blocks(), m = t.options.size();
  BnbContext c;
  c.t = &t;
  c.budget = budget;
  c.start_s.resize(n);
  c.start_m.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t cheap = 0;  // mem is strictly increasing, so option 0 is cheapest
    c.start_m[i] = t.mem[i][cheap];
    c.start_s[i] = t.s[i][cheap];
    // Lower convex hull over the efficient frontier of (mem, s), walked from
    // the cheapest option toward wider ones.
    std::size_t at = cheap;
    while (true) {
      std::size_t pickj = at;
      double best_ratio = 0.0;
      for (std::size_t j = at + 1; j < m; ++j) {
        if (t.s[i][j] >= t.s[i][at]) continue;
        double r = (t.s[i][at] - t.s[i][j]) / double(t.mem[i][j] - t.mem[i][at]);
        if (r > best_ratio) {
          best_ratio = r;
          pickj = j;
        }
      }
      if (pickj == at) break;
      c.steps.push_back({i, t.mem[i][pickj] - t.mem[i][at],
                         t.s[i][pickj] - t.s[i][at], best_ratio});
      at = pickj;
    }
  }
  std::sort(c.steps.begin(), c.steps.end(),
            [](const HullStep& a, const HullStep& b) { return a.ratio > b.ratio; });

  c.suffix_start_s.assign(n + 1, 0.0);
  c.suffix_start_m.assign(n + 1, 0);
  for (std::size_t i = n; i-- > 0;) {
    c.suffix_start_s[i] = c.suffix_start_s[i + 1] + c.start_s[i];
    c.suffix_start_m[i] = c.suffix_start_m[i + 1] + c.start_m[i];
  }

  c.pick.reserve(n);
  bnb_search(c, 0, 0.0, 0);
  return finish_plan(t, c.best_pick, budget);
}

}  // namespace detail

inline AllocationPlan solve_allocation(const SensitivityTable& t, std::uint64_t budget) {
  t.validate();
  detail::check_feasible(t, budget);
  AllocationPlan plan;
  if (detail::solve_dp(t, budget, plan)) return plan;
  return detail::solve_bnb(t, budget);
}

// Reference solver for cross-checking; enumerates every width vector.
inline AllocationPlan brute_force_allocation(const SensitivityTable& t,
                                             std::uint64_t budget) {
  t.validate();
  if (t.blocks() > 20)
    throw NumericError("exhaustive allocation is limited to 20 blocks");
  detail::check_feasible(t, budget);
  const std::size_t n = t.blocks(), m = t.options.size();
  std::vector<std::size_t> pick(n, 0), best;
  double best_obj = std::numeric_limits<double>::infinity();
  std::uint64_t best_bytes = 0;
  while (true) {
    double obj = 0.0;
    std::uint64_t used = 0;
    for (std::size_t i = 0; i < n; ++i) {
      obj += t.s[i][pick[i]];
      used += t.mem[i][pick[i]];
    }
    if (used <= budget &&
        detail::PickCmp::better(obj, used, pick, best_obj, best_bytes, best)) {
      best_obj = obj;
      best_bytes = used;
      best = pick;
    }
    std::size_t i = n;
    while (i-- > 0) {
      if (++pick[i] < m) break;
      pick[i] = 0;
      if (i == 0) return detail::finish_plan(t, best, budget);
    }
  }
}

}  // namespace pqkv
