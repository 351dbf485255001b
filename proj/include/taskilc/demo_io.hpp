#pragma once

// Demonstration ingestion: capture files, timing selection and cropping.

#include <Eigen/Geometry>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskilc/common.hpp"
#include "taskilc/demonstration.hpp"

namespace taskilc {

inline constexpr double kFollowThrough = 0.035;  // t_f - t_c (s)
inline constexpr double kSlowFraction = 0.03;    // "hand at rest" speed relative to the peak
inline constexpr double kArcFraction = 0.05;     // start trim along the path
inline constexpr int kMaxGap = 3;                // fillable marker dropout (samples)
inline constexpr double kCaptureRate = 200.0;

/// Raw motion capture: hand pose and rope markers per sample; NaN marks a dropout.
struct RawCapture {
  std::vector<double> times;
  std::vector<Vec3> hand_position;
  std::vector<Mat3> hand_rotation;
  std::vector<VecX> markers;  // 3 * marker_count per sample
  int marker_count = 11;
  double t_c = 0.0;
  double window_begin = 0.0, window_end = 0.0;
  std::uint64_t seed = 0;

  int samples() const { return static_cast<int>(times.size()); }

  void validate() const {
    const auto n = times.size();
    if (n < 2) throw ConfigError("capture: need at least two samples");
    if (hand_position.size() != n || hand_rotation.size() != n || markers.size() != n)
      throw ConfigError("capture: inconsistent sample counts");
    for (std::size_t i = 1; i < n; ++i)
      if (!(times[i] > times[i - 1])) throw ConfigError("capture: timestamps must be strictly increasing");
    for (const auto& m : markers)
      if (m.size() != 3 * marker_count) throw ConfigError("capture: marker count mismatch");
  }
};

class TimingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class EmptyWindow : public TimingError {
 public:
  using TimingError::TimingError;
};
class GapTooLarge : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TimingResult {
  double t0 = 0.0;        // trimmed start (5% arc length)
  double t_f = 0.0;       // t_c + 35 ms
  double t_peak = 0.0;
  double t_rest = 0.0;    // last near-zero speed sample before the peak
  double peak_speed = 0.0;
  double path_length = 0.0;
};

class NoSlowPoint : public TimingError {
 public:
  NoSlowPoint(const std::string& what, TimingResult best) : TimingError(what), candidate(best) {}
  TimingResult candidate;
};

/// Central-difference derivative on a possibly non-uniform grid; one-sided at the ends.
template <class T>
std::vector<T> differentiate(const std::vector<double>& t, const std::vector<T>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<T> d(n);
  if (n < 2) {
    for (auto& v : d) v = x[0] * 0.0;
    return d;
  }
  for (int i = 0; i < n; ++i) {
    const int a = std::max(0, i - 1), b = std::min(n - 1, i + 1);
    d[i] = (x[b] - x[a]) / (t[b] - t[a]);
  }
  return d;
}

/// Two passes of a two-sample moving average, i.e. weights 1/4, 1/2, 1/4 (ends kept).
template <class T>
std::vector<T> smooth(const std::vector<T>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<T> y = x;
  for (int i = 1; i + 1 < n; ++i) y[i] = 0.25 * x[i - 1] + 0.5 * x[i] + 0.25 * x[i + 1];
  return y;
}

inline std::vector<double> hand_speed(const RawCapture& raw) {
  const auto v = differentiate(raw.times, raw.hand_position);
  std::vector<double> s;
  for (const auto& x : v) s.push_back(x.norm());
  return s;
}

inline TimingResult select_timing(const RawCapture& raw, double window_begin, double window_end) {
  raw.validate();
  const int n = raw.samples();
  int lo = -1, hi = -1;
  for (int i = 0; i < n; ++i)
    if (raw.times[i] >= window_begin - 1e-12 && raw.times[i] <= window_end + 1e-12) {
      if (lo < 0) lo = i;
      hi = i;
    }
  if (lo < 0 || hi - lo < 2) throw EmptyWindow("timing: coarse window holds fewer than three samples");
  if (!(raw.t_c > raw.times[lo] && raw.t_c < raw.times[hi])) throw EmptyWindow("timing: t_c outside the coarse window");

  const auto speed = hand_speed(raw);
  TimingResult r;
  int peak = lo;
  for (int i = lo; i <= hi; ++i)
    if (speed[i] > speed[peak]) peak = i;
  r.t_peak = raw.times[peak];
  r.peak_speed = speed[peak];
  r.t_f = raw.t_c + kFollowThrough;
  if (r.t_f > raw.times.back() + 1e-12) throw EmptyWindow("timing: capture ends before t_c + 35 ms");

  int rest = -1;
  for (int i = peak; i >= lo; --i)
    if (speed[i] <= kSlowFraction * r.peak_speed) {
      rest = i;
      break;
    }
  const bool slow_found = rest >= 0;
  if (!slow_found) rest = lo;
  r.t_rest = raw.times[rest];

  // cumulative path length from the rest sample to t_f; the last segment is cut at t_f
  std::vector<double> cum = {0.0};
  std::vector<int> idx = {rest};
  for (int i = rest + 1; i < n && raw.times[i - 1] < r.t_f - 1e-12; ++i) {
    double seg = (raw.hand_position[i] - raw.hand_position[i - 1]).norm();
    if (raw.times[i] > r.t_f) seg *= (r.t_f - raw.times[i - 1]) / (raw.times[i] - raw.times[i - 1]);
    cum.push_back(cum.back() + seg);
    idx.push_back(i);
  }
  r.path_length = cum.back();
  r.t0 = r.t_rest;
  for (std::size_t k = 0; k < cum.size(); ++k)
    if (cum[k] >= kArcFraction * r.path_length) {
      r.t0 = raw.times[idx[k]];
      break;
    }
  if (!(r.t0 < raw.t_c)) throw TimingError("timing: trimmed start falls after t_c");
  if (!slow_found) throw NoSlowPoint("timing: hand speed never drops to 3% of its peak inside the window", r);
  return r;
}

inline TimingResult select_timing(const RawCapture& raw) { return select_timing(raw, raw.window_begin, raw.window_end); }

namespace demo_detail {

/// Fill NaN runs of length <= kMaxGap in a scalar series by cubic interpolation through the nearest
/// valid neighbours. Returns false if a longer (or unbounded) gap intersects [first, last].
inline bool fill_gaps(std::vector<double>& x, const std::vector<double>& t, int first, int last) {
  const int n = static_cast<int>(x.size());
  int i = 0;
  while (i < n) {
    if (!std::isnan(x[i])) {
      ++i;
      continue;
    }
    int j = i;
    while (j < n && std::isnan(x[j])) ++j;  // gap is [i, j)
    const bool relevant = !(j - 1 < first || i > last);
    const bool bounded = i > 0 && j < n;
    if (j - i > kMaxGap || !bounded) {
      if (relevant) return false;
      i = j;
      continue;
    }
    std::vector<double> tt, vv;
    for (int k = std::max(0, i - 2); k < i; ++k)
      if (!std::isnan(x[k])) tt.push_back(t[k]), vv.push_back(x[k]);
    for (int k = j; k < std::min(n, j + 2); ++k)
      if (!std::isnan(x[k])) tt.push_back(t[k]), vv.push_back(x[k]);
    for (int k = i; k < j; ++k) {
      double s = 0.0;
      for (std::size_t a = 0; a < tt.size(); ++a) {
        double w = 1.0;
        for (std::size_t b = 0; b < tt.size(); ++b)
          if (a != b) w *= (t[k] - tt[b]) / (tt[a] - tt[b]);
        s += w * vv[a];
      }
      x[k] = s;
    }
    i = j;
  }
  return true;
}

}  // namespace demo_detail

struct GapStats {
  int missing = 0;       // marker samples missing before t_c
  int filled = 0;
  int longest_gap = 0;
};

/// Crops the capture to [t0, t_f], fills short marker dropouts and estimates velocities.
/// Rope data is kept up to the first two samples past t_c so t_c can be interpolated.
inline Demonstration build_demonstration(const RawCapture& raw, double t0, double t_f, double t_c,
                                         GapStats* stats = nullptr) {
  raw.validate();
  if (!(t0 < t_c && t_c < t_f)) throw ConfigError("demonstration: need t0 < t_c < t_f");
  const int n = raw.samples();
  if (t0 < raw.times.front() - 1e-9 || t_f > raw.times.back() + 1e-9)
    throw ConfigError("demonstration: timing outside the capture");

  int i0 = 0;
  while (i0 + 1 < n && raw.times[i0 + 1] <= t0 + 1e-9) ++i0;
  int i_f = i0;
  while (i_f + 1 < n && raw.times[i_f + 1] <= t_f + 1e-9) ++i_f;
  int i_c = i0;
  while (i_c < n - 1 && raw.times[i_c] < t_c - 1e-9) ++i_c;  // first sample at or after t_c
  const int i_m = std::min(n - 1, i_c + 2);

  Demonstration d;
  d.t0 = raw.times[i0];
  d.t_c = t_c - d.t0;
  d.T = t_f - d.t0;

  // hand: velocity from the full capture so the crop edges have neighbours
  const auto hv = smooth(differentiate(raw.times, raw.hand_position));
  for (int i = i0; i <= i_f; ++i) {
    d.hand_times.push_back(raw.times[i] - d.t0);
    d.hand_position.push_back(raw.hand_position[i]);
    d.hand_rotation.push_back(raw.hand_rotation[i]);
    d.hand_velocity.push_back(hv[i]);
  }
  if (d.hand_times.back() < d.T - 1e-9) {
    // close the hand trajectory exactly at t_f
    std::vector<double> rel;
    for (double t : raw.times) rel.push_back(t - d.t0);
    const int k = std::min(i_f, n - 2);
    const double a = (d.T - rel[k]) / (rel[k + 1] - rel[k]);
    d.hand_times.push_back(d.T);
    d.hand_position.push_back(lagrange_at(rel, raw.hand_position, d.T));
    d.hand_velocity.push_back(lagrange_at(rel, hv, d.T));
    d.hand_rotation.push_back(Eigen::Quaterniond(raw.hand_rotation[k])
                                  .slerp(a, Eigen::Quaterniond(raw.hand_rotation[k + 1]))
                                  .toRotationMatrix());
  }

  // markers: fill on a slightly wider range, then crop
  const int e0 = std::max(0, i0 - 2), e1 = std::min(n - 1, i_m + 2);
  std::vector<double> tt(raw.times.begin() + e0, raw.times.begin() + e1 + 1);
  const int dims = 3 * raw.marker_count;
  std::vector<VecX> pos(tt.size(), VecX(dims));
  GapStats gs;
  for (int c = 0; c < dims; ++c) {
    std::vector<double> series;
    for (int i = e0; i <= e1; ++i) series.push_back(raw.markers[i][c]);
    int run = 0;
    for (int i = i0; i <= i_c; ++i) {
      if (std::isnan(raw.markers[i][c])) {
        ++run;
        if (c % 3 == 0) ++gs.missing;
      } else {
        run = 0;
      }
      gs.longest_gap = std::max(gs.longest_gap, run);
    }
    if (!demo_detail::fill_gaps(series, tt, i0 - e0, i_c - e0))
      throw GapTooLarge("demonstration: marker " + std::to_string(c / 3 + 1) + " missing for more than " +
                        std::to_string(kMaxGap) + " consecutive samples before t_c");
    for (std::size_t k = 0; k < series.size(); ++k) pos[k][c] = series[k];
  }
  gs.filled = gs.missing;
  const auto vel = smooth(differentiate(tt, pos));
  for (int i = i0; i <= i_m; ++i) {
    const int k = i - e0;
    if (!pos[k].allFinite()) break;  // unfillable data past t_c ends the rope record
    d.marker_times.push_back(raw.times[i] - d.t0);
    d.marker_position.push_back(pos[k]);
    d.marker_velocity.push_back(vel[k].allFinite() ? vel[k] : VecX::Zero(dims));
  }
  if (stats) *stats = gs;
  d.validate();
  return d;
}

// --- file formats ------------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string capture_header(int markers) {
  std::string h = "t,hand_x,hand_y,hand_z,hand_qw,hand_qx,hand_qy,hand_qz";
  for (int m = 1; m <= markers; ++m)
    for (char a : {'x', 'y', 'z'}) h += ",m" + std::to_string(m) + "_" + a;
  return h;
}

inline void write_capture_csv(const RawCapture& raw, std::ostream& out) {
  out << "# seed=" << raw.seed << "\n" << capture_header(raw.marker_count) << "\n";
  for (int i = 0; i < raw.samples(); ++i) {
    const Eigen::Quaterniond q(raw.hand_rotation[i]);
    out << format_double(raw.times[i]);
    for (int a = 0; a < 3; ++a) out << ',' << format_double(raw.hand_position[i][a]);
    out << ',' << format_double(q.w()) << ',' << format_double(q.x()) << ',' << format_double(q.y()) << ','
        << format_double(q.z());
    for (int c = 0; c < 3 * raw.marker_count; ++c) {
      out << ',';
      if (!std::isnan(raw.markers[i][c])) out << format_double(raw.markers[i][c]);
    }
    out << "\n";
  }
}

inline RawCapture read_capture_csv(std::istream& in) {
  RawCapture raw;
  std::string line;
  int line_no = 0;
  int columns = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("seed=");
      if (pos != std::string::npos) raw.seed = std::stoull(line.substr(pos + 5));
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (columns < 0) {
      columns = static_cast<int>(cells.size());
      if (columns < 8 || (columns - 8) % 3 != 0 || cells[0] != "t")
        throw ConfigError("capture CSV: unexpected header at line " + std::to_string(line_no));
      raw.marker_count = (columns - 8) / 3;
      continue;
    }
    if (static_cast<int>(cells.size()) != columns)
      throw ConfigError("capture CSV: wrong column count at line " + std::to_string(line_no));
    auto num = [&](int c) {
      try {
        return std::stod(cells[c]);
      } catch (const std::exception&) {
        throw ConfigError("capture CSV: bad number at line " + std::to_string(line_no));
      }
    };
    raw.times.push_back(num(0));
    raw.hand_position.emplace_back(num(1), num(2), num(3));
    raw.hand_rotation.push_back(Eigen::Quaterniond(num(4), num(5), num(6), num(7)).normalized().toRotationMatrix());
    VecX m(3 * raw.marker_count);
    for (int c = 0; c < 3 * raw.marker_count; ++c)
      m[c] = cells[8 + c].empty() ? std::numeric_limits<double>::quiet_NaN() : num(8 + c);
    raw.markers.push_back(m);
  }
  if (columns < 0) throw ConfigError("capture CSV: empty file");
  return raw;
}

inline RawCapture load_capture(const std::string& csv_path, const std::string& annotation_path) {
  std::ifstream in(csv_path);
  if (!in) throw ConfigError("cannot read capture file " + csv_path);
  RawCapture raw = read_capture_csv(in);
  std::ifstream an(annotation_path);
  if (!an) throw ConfigError("cannot read annotation file " + annotation_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(an);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("annotation " + annotation_path + ": " + e.what());
  }
  if (!j.contains("t_c")) throw ConfigError("annotation " + annotation_path + " lacks t_c");
  raw.t_c = j.at("t_c").get<double>();
  if (j.contains("coarse_window")) {
    raw.window_begin = j.at("coarse_window").at(0).get<double>();
    raw.window_end = j.at("coarse_window").at(1).get<double>();
  } else {
    raw.window_begin = raw.times.front();
    raw.window_end = raw.times.back();
  }
  raw.validate();
  return raw;
}

inline void save_capture(const RawCapture& raw, const std::string& csv_path, const std::string& annotation_path) {
  std::ofstream out(csv_path);
  if (!out) throw ConfigError("cannot write " + csv_path);
  write_capture_csv(raw, out);
  nlohmann::json j;
  j["t_c"] = raw.t_c;
  j["coarse_window"] = {raw.window_begin, raw.window_end};
  std::ofstream an(annotation_path);
  if (!an) throw ConfigError("cannot write " + annotation_path);
  an << j.dump(2) << "\n";
}

}  // namespace taskilc
