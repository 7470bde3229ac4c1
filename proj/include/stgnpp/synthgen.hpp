#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "stgnpp/tensor.hpp"

namespace stgnpp {

constexpr int kSlotsPerDay = 288;   // 5-minute slots
constexpr double kSlotMinutes = 5.0;
constexpr double kSlotHours = 5.0 / 60.0;
constexpr double kMinutesPerDay = 1440.0;

// Peak windows 7-9 and 17-19; used by the generator's duration modulation
// and by the periodic intensity profile.
bool is_peak_slot(int time_of_day);

struct RoadGraph {
  int64_t n_links = 0;
  std::vector<std::pair<int, int>> edges;      // directed pairs; both directions stored
  Tensor adjacency;                            // [n,n] row-normalized, self-loops included
  std::vector<std::vector<int>> neighbors;     // 1-hop, self excluded

  static RoadGraph from_edges(int64_t n_links, std::vector<std::pair<int, int>> edges);
};

// Connected random graph: chain backbone plus random extra edges,
// deterministic per seed.
RoadGraph gen_graph(int64_t n_links, double avg_degree, uint64_t seed);

struct DayProfile {
  std::array<double, kSlotsPerDay> values;

  static DayProfile flat();
  static DayProfile peaks(double peak_mult);   // peak_mult during peak windows, 1 elsewhere
  double at_slot(int tod) const { return values[static_cast<size_t>(tod)]; }
  double at_hours(double t_hours) const;
};

// Analytically integrable ground truth:
//   lambda_n(t) = mu_n * profile(t mod 24h) * (1 + beta * sum_{m in nb(n)} sum_{t_mi < t} exp(-gamma (t - t_mi)))
// Rates are events/hour, gamma in 1/hour; durations are log-normal minutes,
// scaled by peak_duration_mult when the event starts inside a peak window.
struct GroundTruthIntensity {
  std::vector<double> mu;
  DayProfile profile = DayProfile::flat();
  double beta = 0.0;
  double gamma = 2.0;
  double dur_median_min = 20.0;
  double dur_log_sigma = 0.5;
  double peak_duration_mult = 1.5;

  void validate(int64_t n_links) const;
};

struct CongestionEvent {
  int link = 0;
  double t_occ_min = 0;      // minutes from dataset epoch
  double duration_min = 0;
  int64_t first_slot = 0;    // absolute slot indices occupied, inclusive
  int64_t last_slot = 0;
  int time_of_day = 0;       // slot in [0,288)
  int day_of_week = 0;       // [0,7), epoch starts a Monday

  double end_min() const { return t_occ_min + duration_min; }
};

CongestionEvent make_event(int link, double t_occ_min, double duration_min);

using EventLists = std::vector<std::vector<CongestionEvent>>;

// Ogata thinning with the upper bound refreshed at every accepted event and
// every 5-minute profile breakpoint. Overlapping same-link events are merged
// afterwards into one event spanning their union.
EventLists simulate_events(const RoadGraph& graph, const GroundTruthIntensity& gt,
                           double horizon_hours, uint64_t seed);

struct TrafficStateWindow {
  int64_t n_links = 0;
  int64_t n_slots = 0;
  Tensor speeds;                  // [n, T] km/h
  Tensor condition;               // [n, T] 0/1
  std::vector<double> free_flow;  // per-link km/h
};

// Free-flow speed plus a daily sinusoid and small noise; congestion drops
// speed 40-70% instantly at onset with a linear recovery after the event.
TrafficStateWindow gen_speeds(const RoadGraph& graph, const EventLists& events,
                              double horizon_hours, uint64_t seed);

// Exact hazard of one link under the generator, for the oracles. All times
// in hours; rates per hour.
class LinkHazard {
 public:
  LinkHazard(const GroundTruthIntensity& gt, const RoadGraph& graph, const EventLists& events,
             int link);

  double value_at(double t_hours) const;          // lambda_n(t)
  double integral(double a_hours, double b_hours) const;

 private:
  double mu_;
  double beta_;
  double gamma_;
  const DayProfile* profile_;
  std::vector<double> nb_times_;  // sorted neighbor event times, hours
};

// -sum log lambda(t_i) + integral of lambda over the window, summed over all
// links; events strictly inside (t0, t1] contribute log terms, and events
// before t0 still excite into the window.
double oracle_nll(const RoadGraph& graph, const GroundTruthIntensity& gt, const EventLists& events,
                  double t0_hours, double t1_hours);

// NLL of one observed transition: integral over (t_from, t_to] minus
// log lambda(t_to). This is the per-transition unit the model is compared
// against.
double oracle_transition_nll(const RoadGraph& graph, const GroundTruthIntensity& gt,
                             const EventLists& events, int link, double t_from_hours,
                             double t_to_hours);

// Median of the next-event time on `link` given frozen history up to t_now:
// the root of integral_t^{t+tau} lambda = ln 2, bisected to relative
// tolerance 1e-9.
double oracle_median(const RoadGraph& graph, const GroundTruthIntensity& gt,
                     const EventLists& history, int link, double t_now_hours);

}  // namespace stgnpp
