#pragma once

// Toy continuous-control environments rendered to 16x16 grayscale, and the
// offline trajectory dataset format.
//
// Dataset directory: manifest.json + obs.f32 + act.f32 + state.f32, each
// blob a flat little-endian float32 array whose length is in the manifest.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"

namespace subjepa {

enum class EnvId { TwoRoom, Reacher2 };

inline std::string to_string(EnvId e) { return e == EnvId::TwoRoom ? "tworoom" : "reacher2"; }

inline EnvId env_from_string(const std::string& s) {
  if (s == "tworoom") return EnvId::TwoRoom;
  if (s == "reacher2" || s == "reacher") return EnvId::Reacher2;
  throw ContractError("unknown environment: " + s);
}

using State = std::array<double, 2>;
using Action = std::array<double, 2>;

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kObsDim = kImageSide * kImageSide;
inline constexpr std::size_t kStateDim = 2;
inline constexpr std::size_t kActionDim = 2;

using Observation = std::vector<double>;

namespace tworoom {
inline constexpr double kLo = 0.03;
inline constexpr double kHi = 0.97;
inline constexpr double kWallLo = 0.48; // wall occupies x in [0.48, 0.52]
inline constexpr double kWallHi = 0.52;
inline constexpr double kDoorLo = 0.45; // door gap y in [0.45, 0.55]
inline constexpr double kDoorHi = 0.55;
inline constexpr double kFaceGap = 1e-6;
inline constexpr double kActionBound = 0.08;

inline bool in_door(double y) { return y >= kDoorLo && y <= kDoorHi; }
inline bool in_wall(const State& s) { return s[0] >= kWallLo && s[0] <= kWallHi && !in_door(s[1]); }
} // namespace tworoom

namespace reacher {
inline constexpr double kActionBound = 0.15;
inline constexpr double kLink1 = 0.2;
inline constexpr double kLink2 = 0.15;
} // namespace reacher

inline double clamp(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

inline Action clamp_action(const Action& a, double bound) {
  return {clamp(a[0], -bound, bound), clamp(a[1], -bound, bound)};
}

/// Point agent; x is resolved first (blocked at the wall face unless inside
/// the door rows), then y (kept inside the door while in the wall band).
inline State tworoom_step(const State& s, const Action& raw) {
  using namespace tworoom;
  const Action a = clamp_action(raw, kActionBound);
  double x = clamp(s[0] + a[0], kLo, kHi);
  double y = s[1];
  if (!in_door(y)) {
    if (s[0] < kWallLo && x >= kWallLo) x = kWallLo - kFaceGap;
    if (s[0] > kWallHi && x <= kWallHi) x = kWallHi + kFaceGap;
  }
  y = clamp(y + a[1], kLo, kHi);
  if (x >= kWallLo && x <= kWallHi) y = clamp(y, kDoorLo, kDoorHi);
  return {x, y};
}

/// Wraps to [-pi, pi).
inline double wrap_angle(double t) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = t - two_pi * std::floor((t + std::numbers::pi) / two_pi);
  if (w >= std::numbers::pi) w -= two_pi;
  return w;
}

inline State reacher2_step(const State& s, const Action& raw) {
  const Action a = clamp_action(raw, reacher::kActionBound);
  return {wrap_angle(s[0] + a[0]), wrap_angle(s[1] + a[1])};
}

inline std::array<double, 2> reacher2_elbow(const State& s) {
  return {0.5 + reacher::kLink1 * std::cos(s[0]), 0.5 + reacher::kLink1 * std::sin(s[0])};
}

inline std::array<double, 2> reacher2_end_effector(const State& s) {
  const auto e = reacher2_elbow(s);
  return {e[0] + reacher::kLink2 * std::cos(s[0] + s[1]), e[1] + reacher::kLink2 * std::sin(s[0] + s[1])};
}

inline double action_bound(EnvId env) {
  return env == EnvId::TwoRoom ? tworoom::kActionBound : reacher::kActionBound;
}

inline State env_step(EnvId env, const State& s, const Action& a) {
  return env == EnvId::TwoRoom ? tworoom_step(s, a) : reacher2_step(s, a);
}

/// Distance used for goal success: state distance (TwoRoom) or
/// end-effector distance (Reacher2).
inline double goal_distance(EnvId env, const State& s, const State& g) {
  if (env == EnvId::TwoRoom) return std::hypot(s[0] - g[0], s[1] - g[1]);
  const auto p = reacher2_end_effector(s), q = reacher2_end_effector(g);
  return std::hypot(p[0] - q[0], p[1] - q[1]);
}

/// Uniform valid state.
inline State sample_state(EnvId env, Rng& rng) {
  if (env == EnvId::Reacher2)
    return {rng.uniform(-std::numbers::pi, std::numbers::pi), rng.uniform(-std::numbers::pi, std::numbers::pi)};
  while (true) {
    State s{rng.uniform(tworoom::kLo, tworoom::kHi), rng.uniform(tworoom::kLo, tworoom::kHi)};
    if (!tworoom::in_wall(s)) return s;
  }
}

inline Action sample_action(EnvId env, Rng& rng) {
  const double b = action_bound(env);
  return {rng.uniform(-b, b), rng.uniform(-b, b)};
}

// ---------------------------------------------------------------------------
// Rendering (row = y index, column = x index)

namespace detail {

inline int to_pixel(double v) {
  return static_cast<int>(clamp(std::floor(v * static_cast<double>(kImageSide)), 0.0, kImageSide - 1.0));
}

inline void draw_line(Observation& img, int x0, int y0, int x1, int y1) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    img[static_cast<std::size_t>(y0) * kImageSide + static_cast<std::size_t>(x0)] = 1.0;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

} // namespace detail

/// Wall columns are the pixel columns overlapping [0.48, 0.52]; door rows are
/// those whose centre lies in [0.45, 0.55]. The agent is a 2x2 block whose
/// top-left pixel is round(16 p) - 1, clamped to the grid.
inline Observation render_tworoom(const State& s) {
  Observation img(kObsDim, 0.0);
  const double side = static_cast<double>(kImageSide);
  for (std::size_t c = 0; c < kImageSide; ++c) {
    const double lo = static_cast<double>(c) / side, hi = static_cast<double>(c + 1) / side;
    if (!(lo < tworoom::kWallHi && hi > tworoom::kWallLo)) continue;
    for (std::size_t r = 0; r < kImageSide; ++r) {
      const double centre = (static_cast<double>(r) + 0.5) / side;
      if (!tworoom::in_door(centre)) img[r * kImageSide + c] = 0.5;
    }
  }
  const auto corner = [&](double v) {
    return static_cast<std::size_t>(clamp(std::round(v * side) - 1.0, 0.0, side - 2.0));
  };
  const std::size_t c0 = corner(s[0]), r0 = corner(s[1]);
  for (std::size_t r = r0; r < r0 + 2; ++r)
    for (std::size_t c = c0; c < c0 + 2; ++c) img[r * kImageSide + c] = 1.0;
  return img;
}

inline Observation render_reacher2(const State& s) {
  Observation img(kObsDim, 0.0);
  const auto e = reacher2_elbow(s);
  const auto t = reacher2_end_effector(s);
  const int bx = detail::to_pixel(0.5), by = detail::to_pixel(0.5);
  detail::draw_line(img, bx, by, detail::to_pixel(e[0]), detail::to_pixel(e[1]));
  detail::draw_line(img, detail::to_pixel(e[0]), detail::to_pixel(e[1]), detail::to_pixel(t[0]),
                    detail::to_pixel(t[1]));
  return img;
}

inline Observation render(EnvId env, const State& s) {
  return env == EnvId::TwoRoom ? render_tworoom(s) : render_reacher2(s);
}

// ---------------------------------------------------------------------------
// Offline dataset

/// Episodes of observations, actions and hidden states, stored as float32.
/// States are for probing and evaluation only; training never reads them.
struct TrajectoryDataset {
  EnvId env = EnvId::TwoRoom;
  std::size_t episodes = 0;
  std::size_t length = 0; // T
  std::uint64_t seed = 0;
  std::vector<float> obs;   // episodes x T x 256
  std::vector<float> act;   // episodes x (T-1) x 2
  std::vector<float> state; // episodes x T x 2

  std::span<const float> observation(std::size_t e, std::size_t t) const {
    return {obs.data() + (e * length + t) * kObsDim, kObsDim};
  }
  Action action(std::size_t e, std::size_t t) const {
    const float* p = act.data() + (e * (length - 1) + t) * kActionDim;
    return {p[0], p[1]};
  }
  State hidden_state(std::size_t e, std::size_t t) const {
    const float* p = state.data() + (e * length + t) * kStateDim;
    return {p[0], p[1]};
  }

  bool operator==(const TrajectoryDataset&) const = default;
};

namespace detail {
inline State to_f32(const State& s) { return {static_cast<float>(s[0]), static_cast<float>(s[1])}; }

// Rounding a door-edge y to float can land it a hair outside the door while x
// is in the wall band; step it back inside.
inline State to_f32(EnvId env, const State& s) {
  State r = to_f32(s);
  if (env == EnvId::TwoRoom && tworoom::in_wall(r)) {
    const float y = static_cast<float>(r[1]);
    r[1] = std::nextafter(y, y > 0.5f ? 0.0f : 1.0f);
  }
  return r;
}
} // namespace detail

/// Replays float32 actions from a float32 state, rounding each new state to
/// float32 exactly as dataset generation does.
inline State replay_step(EnvId env, const State& s, const Action& a) {
  return detail::to_f32(env, env_step(env, detail::to_f32(s), detail::to_f32(a)));
}

/// Uniform-random behaviour policy from uniform random initial states.
/// Episode e uses the RNG stream derive_seed(seed, e).
inline TrajectoryDataset generate_dataset(EnvId env, std::size_t episodes, std::size_t length, std::uint64_t seed) {
  require(episodes >= 1 && length >= 1, "generate_dataset: episodes and length must be >= 1");
  TrajectoryDataset ds;
  ds.env = env;
  ds.episodes = episodes;
  ds.length = length;
  ds.seed = seed;
  ds.obs.reserve(episodes * length * kObsDim);
  ds.act.reserve(episodes * (length - 1) * kActionDim);
  ds.state.reserve(episodes * length * kStateDim);
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng(derive_seed(seed, e));
    State s = detail::to_f32(env, sample_state(env, rng));
    for (std::size_t t = 0; t < length; ++t) {
      const Observation o = render(env, s);
      for (double v : o) ds.obs.push_back(static_cast<float>(v));
      ds.state.push_back(static_cast<float>(s[0]));
      ds.state.push_back(static_cast<float>(s[1]));
      if (t + 1 == length) break;
      const Action a = detail::to_f32(sample_action(env, rng));
      ds.act.push_back(static_cast<float>(a[0]));
      ds.act.push_back(static_cast<float>(a[1]));
      s = replay_step(env, s, a);
    }
  }
  return ds;
}

namespace detail {

inline void write_f32(const std::filesystem::path& p, const std::vector<float>& v) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string() + " for writing");
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!f) throw IoError("write failed: " + p.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& p, std::size_t count) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open " + p.string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes != count * sizeof(float)) throw IoError("size mismatch in " + p.string());
  f.seekg(0);
  std::vector<float> v(count);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  return v;
}

} // namespace detail

inline void write_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {
      {"format", "subjepa-dataset-1"},
      {"env", to_string(ds.env)},
      {"episodes", ds.episodes},
      {"T", ds.length},
      {"seed", ds.seed},
      {"dtype", "f32"},
      {"obs_shape", {kImageSide, kImageSide}},
      {"action_dim", kActionDim},
      {"state_dim", kStateDim},
      {"files",
       {{"obs", {{"path", "obs.f32"}, {"count", ds.obs.size()}}},
        {"act", {{"path", "act.f32"}, {"count", ds.act.size()}}},
        {"state", {{"path", "state.f32"}, {"count", ds.state.size()}}}}}};
  std::ofstream m(dir / "manifest.json");
  if (!m) throw IoError("cannot write manifest in " + dir.string());
  m << manifest.dump(2) << '\n';
  detail::write_f32(dir / "obs.f32", ds.obs);
  detail::write_f32(dir / "act.f32", ds.act);
  detail::write_f32(dir / "state.f32", ds.state);
}

inline TrajectoryDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw IoError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad manifest: ") + e.what());
  }
  TrajectoryDataset ds;
  ds.env = env_from_string(manifest.at("env"));
  ds.episodes = manifest.at("episodes");
  ds.length = manifest.at("T");
  ds.seed = manifest.at("seed");
  if (manifest.at("dtype") != "f32") throw IoError("unsupported dtype");
  const auto& files = manifest.at("files");
  const std::size_t n_obs = files.at("obs").at("count"), n_act = files.at("act").at("count"),
                    n_state = files.at("state").at("count");
  if (n_obs != ds.episodes * ds.length * kObsDim || n_state != ds.episodes * ds.length * kStateDim ||
      n_act != ds.episodes * (ds.length - 1) * kActionDim)
    throw IoError("manifest counts inconsistent with episodes/T");
  ds.obs = detail::read_f32(dir / files.at("obs").at("path").get<std::string>(), n_obs);
  ds.act = detail::read_f32(dir / files.at("act").at("path").get<std::string>(), n_act);
  ds.state = detail::read_f32(dir / files.at("state").at("path").get<std::string>(), n_state);
  return ds;
}

} // namespace subjepa
