#include "stgnpp/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace stgnpp {

bool is_peak_slot(int tod) {
  return (tod >= 7 * 12 && tod < 9 * 12) || (tod >= 17 * 12 && tod < 19 * 12);
}

RoadGraph RoadGraph::from_edges(int64_t n_links, std::vector<std::pair<int, int>> edges) {
  RoadGraph g;
  g.n_links = n_links;
  g.edges = std::move(edges);
  g.neighbors.assign(static_cast<size_t>(n_links), {});
  Tensor a = Tensor::zeros({n_links, n_links});
  for (int64_t i = 0; i < n_links; ++i) a.at(i, i) = 1.0;  // self-loops before normalization
  for (auto [s, d] : g.edges) {
    if (s < 0 || d < 0 || s >= n_links || d >= n_links)
      throw std::invalid_argument("edge endpoint out of range");
    a.at(s, d) = 1.0;
    g.neighbors[static_cast<size_t>(s)].push_back(d);
  }
  for (auto& nb : g.neighbors) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  for (int64_t i = 0; i < n_links; ++i) {
    double s = 0;
    for (int64_t j = 0; j < n_links; ++j) s += a.at(i, j);
    for (int64_t j = 0; j < n_links; ++j) a.at(i, j) /= s;
  }
  g.adjacency = std::move(a);
  return g;
}

RoadGraph gen_graph(int64_t n_links, double avg_degree, uint64_t seed) {
  if (n_links < 1) throw std::invalid_argument("gen_graph: n_links must be >= 1");
  if (avg_degree >= static_cast<double>(n_links))
    throw std::invalid_argument("gen_graph: avg_degree " + std::to_string(avg_degree) +
                                " must be < n_links " + std::to_string(n_links));
  Rng rng(seed);
  std::set<std::pair<int, int>> undirected;
  for (int64_t i = 0; i + 1 < n_links; ++i)
    undirected.insert({static_cast<int>(i), static_cast<int>(i + 1)});
  const int64_t target = static_cast<int64_t>(std::llround(avg_degree * static_cast<double>(n_links) / 2.0));
  int64_t attempts = 0;
  while (static_cast<int64_t>(undirected.size()) < target && attempts < 100 * target + 100) {
    ++attempts;
    int i = static_cast<int>(rng.randint(0, n_links - 1));
    int j = static_cast<int>(rng.randint(0, n_links - 1));
    if (i == j) continue;
    undirected.insert({std::min(i, j), std::max(i, j)});
  }
  std::vector<std::pair<int, int>> edges;
  for (auto [i, j] : undirected) {
    edges.push_back({i, j});
    edges.push_back({j, i});
  }
  std::sort(edges.begin(), edges.end());
  return RoadGraph::from_edges(n_links, std::move(edges));
}

DayProfile DayProfile::flat() {
  DayProfile p;
  p.values.fill(1.0);
  return p;
}

DayProfile DayProfile::peaks(double peak_mult) {
  DayProfile p;
  for (int s = 0; s < kSlotsPerDay; ++s) p.values[static_cast<size_t>(s)] = is_peak_slot(s) ? peak_mult : 1.0;
  return p;
}

double DayProfile::at_hours(double t_hours) const {
  double day = std::fmod(t_hours, 24.0);
  if (day < 0) day += 24.0;
  int slot = static_cast<int>(day / kSlotHours);
  if (slot >= kSlotsPerDay) slot = kSlotsPerDay - 1;
  return values[static_cast<size_t>(slot)];
}

void GroundTruthIntensity::validate(int64_t n_links) const {
  if (static_cast<int64_t>(mu.size()) != n_links)
    throw std::invalid_argument("ground truth mu size != n_links");
  for (double m : mu)
    if (!(m > 0)) throw std::invalid_argument("ground truth mu must be > 0");
  for (double v : profile.values)
    if (!(v > 0)) throw std::invalid_argument("profile values must be > 0");
  if (beta < 0) throw std::invalid_argument("beta must be >= 0");
  if (!(gamma > 0)) throw std::invalid_argument("gamma must be > 0");
}

CongestionEvent make_event(int link, double t_occ_min, double duration_min) {
  CongestionEvent e;
  e.link = link;
  e.t_occ_min = t_occ_min;
  e.duration_min = duration_min;
  e.first_slot = static_cast<int64_t>(std::floor(t_occ_min / kSlotMinutes));
  e.last_slot = static_cast<int64_t>(std::ceil((t_occ_min + duration_min) / kSlotMinutes)) - 1;
  if (e.last_slot < e.first_slot) e.last_slot = e.first_slot;
  e.time_of_day = static_cast<int>(static_cast<int64_t>(std::floor(t_occ_min / kSlotMinutes)) % kSlotsPerDay);
  e.day_of_week = static_cast<int>(static_cast<int64_t>(std::floor(t_occ_min / kMinutesPerDay)) % 7);
  return e;
}

EventLists simulate_events(const RoadGraph& graph, const GroundTruthIntensity& gt,
                           double horizon_hours, uint64_t seed) {
  if (!(horizon_hours > 0)) throw std::invalid_argument("horizon must be > 0");
  gt.validate(graph.n_links);
  const int64_t n = graph.n_links;
  Rng rng(seed);

  struct RawEvent {
    double t_hours;
    double duration_min;
    int link;
  };
  std::vector<std::vector<RawEvent>> raw(static_cast<size_t>(n));

  std::vector<double> excite(static_cast<size_t>(n), 0.0);  // E_n at current time
  double t = 0.0;
  const double log_mu_d = std::log(gt.dur_median_min);
  while (t < horizon_hours) {
    const int64_t slot_index = static_cast<int64_t>(std::floor(t / kSlotHours + 1e-12));
    const double slot_end = static_cast<double>(slot_index + 1) * kSlotHours;
    const double boundary = std::min(slot_end, horizon_hours);
    const double prof = gt.profile.at_slot(static_cast<int>(slot_index % kSlotsPerDay));

    double bound = 0.0;
    for (int64_t i = 0; i < n; ++i)
      bound += gt.mu[static_cast<size_t>(i)] * prof * (1.0 + gt.beta * excite[static_cast<size_t>(i)]);
    const double wait = rng.exponential(bound);

    if (t + wait >= boundary) {
      const double decay = std::exp(-gt.gamma * (boundary - t));
      for (double& e : excite) e *= decay;
      t = boundary;
      continue;
    }
    const double t_cand = t + wait;
    const double decay = std::exp(-gt.gamma * wait);
    for (double& e : excite) e *= decay;

    double total = 0.0;
    for (int64_t i = 0; i < n; ++i)
      total += gt.mu[static_cast<size_t>(i)] * prof * (1.0 + gt.beta * excite[static_cast<size_t>(i)]);
    if (total > bound * (1.0 + 1e-9))
      throw std::logic_error("thinning upper bound violated; generator is inconsistent");

    const double u = rng.uniform(0.0, 1.0);
    if (u * bound <= total) {
      // accepted: pick the link proportionally to its intensity
      double r = rng.uniform(0.0, 1.0) * total;
      int link = static_cast<int>(n) - 1;
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        acc += gt.mu[static_cast<size_t>(i)] * prof * (1.0 + gt.beta * excite[static_cast<size_t>(i)]);
        if (r <= acc) {
          link = static_cast<int>(i);
          break;
        }
      }
      double d = std::exp(rng.normal(log_mu_d, gt.dur_log_sigma));
      const int tod = static_cast<int>(static_cast<int64_t>(std::floor(t_cand * 60.0 / kSlotMinutes)) % kSlotsPerDay);
      if (is_peak_slot(tod)) d *= gt.peak_duration_mult;
      raw[static_cast<size_t>(link)].push_back({t_cand, d, link});
      for (int m : graph.neighbors[static_cast<size_t>(link)]) excite[static_cast<size_t>(m)] += 1.0;
    }
    t = t_cand;
  }

  EventLists out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    auto& lst = out[static_cast<size_t>(i)];
    for (const RawEvent& re : raw[static_cast<size_t>(i)]) {
      const double t_min = re.t_hours * 60.0;
      if (!lst.empty() && t_min < lst.back().end_min()) {
        // overlapping same-link events merge into one spanning their union
        CongestionEvent& prev = lst.back();
        const double new_end = std::max(prev.end_min(), t_min + re.duration_min);
        lst.back() = make_event(prev.link, prev.t_occ_min, new_end - prev.t_occ_min);
      } else {
        lst.push_back(make_event(re.link, t_min, re.duration_min));
      }
    }
  }
  return out;
}

TrafficStateWindow gen_speeds(const RoadGraph& graph, const EventLists& events,
                              double horizon_hours, uint64_t seed) {
  const int64_t n = graph.n_links;
  const int64_t T = static_cast<int64_t>(std::llround(horizon_hours / kSlotHours));
  Rng rng(seed);
  TrafficStateWindow w;
  w.n_links = n;
  w.n_slots = T;
  w.speeds = Tensor::zeros({n, T});
  w.condition = Tensor::zeros({n, T});
  w.free_flow.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) w.free_flow[static_cast<size_t>(i)] = rng.uniform(50.0, 90.0);

  for (int64_t i = 0; i < n; ++i) {
    const double ff = w.free_flow[static_cast<size_t>(i)];
    const auto& evs = events[static_cast<size_t>(i)];
    std::vector<double> drop(evs.size());
    for (double& d : drop) d = rng.uniform(0.4, 0.7);

    for (int64_t s = 0; s < T; ++s) {
      const double th = (static_cast<double>(s) + 0.5) * kSlotHours;
      const double base = ff * (1.0 + 0.04 * std::sin(2.0 * M_PI * (std::fmod(th, 24.0) - 9.0) / 24.0));
      w.speeds.at(i, s) = std::max(3.0, base + rng.normal(0.0, 1.2));
    }
    for (size_t e = 0; e < evs.size(); ++e) {
      const CongestionEvent& ev = evs[e];
      const double vcong = std::max(3.0, ff * (1.0 - drop[e]));
      for (int64_t s = std::max<int64_t>(0, ev.first_slot); s <= std::min(T - 1, ev.last_slot); ++s) {
        w.condition.at(i, s) = 1.0;
        w.speeds.at(i, s) = std::min(vcong, ff - 1.0);  // instantaneous drop, strictly below free flow
      }
    }
    // linear recovery over three slots after each event
    for (size_t e = 0; e < evs.size(); ++e) {
      const CongestionEvent& ev = evs[e];
      const double vcong = std::max(3.0, ff * (1.0 - drop[e]));
      for (int64_t k = 1; k <= 3; ++k) {
        const int64_t s = ev.last_slot + k;
        if (s < 0 || s >= T) break;
        if (w.condition.at(i, s) != 0.0) break;  // a later event owns this slot
        const double frac = static_cast<double>(k) / 4.0;
        w.speeds.at(i, s) = vcong + (w.speeds.at(i, s) - vcong) * frac;
      }
    }
  }
  return w;
}

namespace {

double profile_piece_end(double t_hours) {
  const double slot = std::floor(t_hours / kSlotHours + 1e-12);
  double end = (slot + 1.0) * kSlotHours;
  if (end <= t_hours) end = t_hours + kSlotHours;
  return end;
}

}  // namespace

LinkHazard::LinkHazard(const GroundTruthIntensity& gt, const RoadGraph& graph,
                       const EventLists& events, int link)
    : mu_(gt.mu[static_cast<size_t>(link)]), beta_(gt.beta), gamma_(gt.gamma), profile_(&gt.profile) {
  for (int m : graph.neighbors[static_cast<size_t>(link)])
    for (const CongestionEvent& e : events[static_cast<size_t>(m)]) nb_times_.push_back(e.t_occ_min / 60.0);
  std::sort(nb_times_.begin(), nb_times_.end());
}

double LinkHazard::value_at(double t) const {
  double ex = 0.0;
  if (beta_ > 0)
    for (double tm : nb_times_) {
      if (tm >= t) break;
      ex += std::exp(-gamma_ * (t - tm));
    }
  return mu_ * profile_->at_hours(t) * (1.0 + beta_ * ex);
}

double LinkHazard::integral(double a, double b) const {
  if (b <= a) return 0.0;
  // excitation state at a
  double ex = 0.0;
  size_t next = 0;
  if (beta_ > 0) {
    while (next < nb_times_.size() && nb_times_[next] < a) {
      ex += std::exp(-gamma_ * (a - nb_times_[next]));
      ++next;
    }
  } else {
    next = nb_times_.size();
  }
  double total = 0.0;
  double t = a;
  while (t < b) {
    double stop = std::min(b, profile_piece_end(t));
    if (next < nb_times_.size() && nb_times_[next] < stop) stop = nb_times_[next];
    const double dt = stop - t;
    const double p = profile_->at_hours(t + 0.5 * std::min(dt, kSlotHours));
    double seg = mu_ * p * dt;
    if (beta_ > 0 && ex > 0) seg += mu_ * p * beta_ * ex * (1.0 - std::exp(-gamma_ * dt)) / gamma_;
    total += seg;
    if (beta_ > 0) ex *= std::exp(-gamma_ * dt);
    if (next < nb_times_.size() && nb_times_[next] == stop) {
      ex += 1.0;
      ++next;
    }
    t = stop;
  }
  return total;
}

double oracle_nll(const RoadGraph& graph, const GroundTruthIntensity& gt, const EventLists& events,
                  double t0, double t1) {
  gt.validate(graph.n_links);
  double nll = 0.0;
  for (int64_t i = 0; i < graph.n_links; ++i) {
    LinkHazard hz(gt, graph, events, static_cast<int>(i));
    nll += hz.integral(t0, t1);
    for (const CongestionEvent& e : events[static_cast<size_t>(i)]) {
      const double th = e.t_occ_min / 60.0;
      if (th > t0 && th <= t1) nll -= std::log(hz.value_at(th));
    }
  }
  return nll;
}

double oracle_transition_nll(const RoadGraph& graph, const GroundTruthIntensity& gt,
                             const EventLists& events, int link, double t_from, double t_to) {
  LinkHazard hz(gt, graph, events, link);
  return hz.integral(t_from, t_to) - std::log(hz.value_at(t_to));
}

double oracle_median(const RoadGraph& graph, const GroundTruthIntensity& gt,
                     const EventLists& history, int link, double t_now) {
  gt.validate(graph.n_links);
  LinkHazard hz(gt, graph, history, link);
  const double target = std::log(2.0);
  double hi = 1.0;
  while (hz.integral(t_now, t_now + hi) < target) {
    hi *= 2.0;
    if (hi > 1e9) throw std::runtime_error("oracle_median: hazard does not reach ln 2");
  }
  double lo = 0.0;
  while (hi - lo > 1e-9 * std::max(1.0, hi)) {
    const double mid = 0.5 * (lo + hi);
    if (hz.integral(t_now, t_now + mid) < target)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace stgnpp
