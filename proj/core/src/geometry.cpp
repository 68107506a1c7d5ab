#include "vqc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vqc {

namespace {

constexpr double kMinRange = 1e-9;

void check_len(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw InvalidArgument(std::string(what) + ": expected length " + std::to_string(want) +
                          ", got " + std::to_string(got));
  }
}

// LOS/NLOS mixing weights for a Rician factor.
struct RicianWeights {
  double los;
  double nlos;
};

RicianWeights rician_weights(double epsilon) {
  if (std::isinf(epsilon)) return {1.0, 0.0};
  return {std::sqrt(epsilon / (1.0 + epsilon)), std::sqrt(1.0 / (1.0 + epsilon))};
}

}  // namespace

double distance(const Position& a, const Position& b) {
  return std::hypot(a.x - b.x, a.y - b.y, a.z - b.z);
}

bool ServiceArea::contains(const Position& p) const {
  return p.x >= x_min() && p.x <= x_max() && p.y >= y_min() && p.y <= y_max();
}

std::vector<std::string> SystemLayout::problems() const {
  std::vector<std::string> p;
  if (ris_positions.empty()) p.emplace_back("layout.ris: at least one RIS is required");
  if (M == 0) p.emplace_back("layout.M: must be >= 1");
  if (N == 0) p.emplace_back("layout.N: must be >= 1");
  if (C == 0) p.emplace_back("layout.C: must be >= 1");
  if (N > 0 && C > 0 && N % C != 0) {
    p.push_back("layout.C: C=" + std::to_string(C) + " does not divide N=" + std::to_string(N));
  }
  if (!(spacing_ris > 0.0)) p.emplace_back("layout.spacing_ris: must be > 0");
  if (!(spacing_bs > 0.0)) p.emplace_back("layout.spacing_bs: must be > 0");
  if (!(service_area.half_x >= 0.0) || !(service_area.half_y >= 0.0)) {
    p.emplace_back("layout.area: half-extents must be >= 0");
  }
  return p;
}

void SystemLayout::validate() const { throw_problems(problems()); }

AngleSet compute_angles(const SystemLayout& layout, const Position& ue, std::size_t k) {
  if (k >= layout.K()) throw InvalidArgument("compute_angles: RIS index out of range");
  const Position& ris = layout.ris_positions[k];
  const Position& bs = layout.bs_position;

  AngleSet a;
  const double dx = ue.x - ris.x;
  const double dy = ue.y - ris.y;
  const double dz = ris.z - ue.z;
  a.r_ur = std::hypot(dx, dy, dz);
  if (a.r_ur < kMinRange) throw InvalidArgument("compute_angles: UE coincides with RIS");
  a.mu_ris = std::atan2(dy, dx);
  a.gamma_ris = std::acos(std::clamp(dz / a.r_ur, -1.0, 1.0));

  const double ex = ris.x - bs.x;
  const double ey = ris.y - bs.y;
  const double ez = ris.z - bs.z;
  a.r_rb = std::hypot(ex, ey, ez);
  if (a.r_rb < kMinRange) throw InvalidArgument("compute_angles: RIS coincides with BS");
  a.phi_ris = std::atan2(ey, ex);
  a.upsilon_ris = std::atan2(std::hypot(ex, ey), ez);
  a.gamma_bs = std::asin(std::clamp(ez / a.r_rb, -1.0, 1.0));

  a.r_ub = distance(ue, bs);
  if (a.r_ub < kMinRange) throw InvalidArgument("compute_angles: UE coincides with BS");
  a.gamma_ue = std::asin(std::clamp((ue.z - bs.z) / a.r_ub, -1.0, 1.0));
  return a;
}

CVector ris_steering(double mu, double gamma, std::size_t N, std::size_t C, double spacing) {
  if (C == 0 || N % C != 0) throw InvalidArgument("ris_steering: C must divide N");
  const double horiz = std::sin(mu) * std::cos(gamma);
  const double vert = std::sin(gamma);
  CVector u(N);
  for (std::size_t n = 0; n < N; ++n) {
    const double v1 = static_cast<double>(n % C);
    const double v2 = static_cast<double>(n / C);
    u[n] = std::polar(1.0, spacing * (v1 * horiz + v2 * vert));
  }
  return u;
}

CVector bs_steering(double gamma, std::size_t M, double spacing) {
  if (M == 0) throw InvalidArgument("bs_steering: M must be >= 1");
  const double c = std::cos(gamma);
  CVector u(M);
  for (std::size_t m = 0; m < M; ++m) {
    u[m] = std::polar(1.0, spacing * static_cast<double>(m) * c);
  }
  return u;
}

double path_loss_db(PathKind kind, double distance_m) {
  if (!(distance_m > 0.0)) throw InvalidArgument("path_loss: distance must be > 0");
  const double l = std::log10(distance_m);
  return kind == PathKind::direct ? 32.6 + 36.7 * l : 30.0 + 22.0 * l;
}

double path_loss_amplitude(PathKind kind, double distance_m) {
  return std::pow(10.0, -path_loss_db(kind, distance_m) / 20.0);
}

namespace {

ChannelRealization build_channel(const SystemLayout& layout, const Position& ue, double epsilon,
                                 Rng* rng) {
  layout.validate();
  const RicianWeights wgt = rician_weights(epsilon);
  const bool draw = rng != nullptr && wgt.nlos != 0.0;
  auto nlos = [&]() -> Complex { return draw ? complex_normal(*rng) : Complex{}; };

  ChannelRealization ch;
  ch.epsilon = epsilon;
  const std::size_t M = layout.M;
  const std::size_t N = layout.N;

  const AngleSet a0 = compute_angles(layout, ue, 0);
  ch.rho = path_loss_amplitude(PathKind::direct, a0.r_ub);
  const CVector u_ue = bs_steering(a0.gamma_ue, M, layout.spacing_bs);
  ch.h_d.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    ch.h_d[m] = ch.rho * (wgt.los * u_ue[m] + wgt.nlos * nlos());
  }

  for (std::size_t k = 0; k < layout.K(); ++k) {
    const AngleSet a = compute_angles(layout, ue, k);
    const double kappa = path_loss_amplitude(PathKind::reflected, a.r_ur);
    const double xi = path_loss_amplitude(PathKind::reflected, a.r_rb);
    ch.kappa.push_back(kappa);
    ch.xi.push_back(xi);

    const CVector u_in = ris_steering(a.mu_ris, a.gamma_ris, N, layout.C, layout.spacing_ris);
    CVector h(N);
    for (std::size_t n = 0; n < N; ++n) h[n] = kappa * (wgt.los * u_in[n] + wgt.nlos * nlos());
    ch.h_r.push_back(std::move(h));

    const CVector u_bs = bs_steering(a.gamma_bs, M, layout.spacing_bs);
    const CVector u_out =
        ris_steering(a.phi_ris, a.upsilon_ris, N, layout.C, layout.spacing_ris);
    CMatrix G(M, N);
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t n = 0; n < N; ++n) {
        G(m, n) = xi * (wgt.los * u_bs[m] * std::conj(u_out[n]) + wgt.nlos * nlos());
      }
    }
    ch.G_r.push_back(std::move(G));
  }
  return ch;
}

}  // namespace

ChannelRealization sample_channel(const SystemLayout& layout, const Position& ue, double epsilon,
                                  Rng& rng) {
  if (!(epsilon >= 0.0)) throw InvalidArgument("sample_channel: epsilon must be >= 0");
  return build_channel(layout, ue, epsilon, &rng);
}

ChannelRealization los_channel(const SystemLayout& layout, const Position& ue) {
  return build_channel(layout, ue, std::numeric_limits<double>::infinity(), nullptr);
}

CMatrix cascade_channel(const CVector& h_r, const CMatrix& G_r) {
  if (G_r.cols() != h_r.size()) {
    throw InvalidArgument("cascade_channel: G_r has " + std::to_string(G_r.cols()) +
                          " columns, h_r has length " + std::to_string(h_r.size()));
  }
  CMatrix H(G_r.cols(), G_r.rows());
  for (std::size_t n = 0; n < H.rows(); ++n) {
    for (std::size_t m = 0; m < H.cols(); ++m) H(n, m) = h_r[n] * G_r(m, n);
  }
  return H;
}

PilotConfig PilotConfig::from_snr_db(double snr_db, double noise_dbm) {
  PilotConfig cfg;
  cfg.p_u = std::pow(10.0, snr_db / 10.0);
  cfg.sigma2 = std::pow(10.0, (noise_dbm - 30.0) / 10.0);
  return cfg;
}

void PilotConfig::validate() const {
  if (!(p_u > 0.0)) throw InvalidArgument("pilot: p_u must be > 0");
  if (!(sigma2 >= 0.0)) throw InvalidArgument("pilot: sigma2 must be >= 0");
}

namespace {

// w^T (h_d + sum_k H_c,k^T theta_k), restricted to the selected paths.
Complex combine(const ChannelRealization& ch, std::span<const Complex> w,
                std::span<const CVector> thetas, const PathSelection& paths) {
  const std::size_t M = ch.h_d.size();
  check_len(w.size(), M, "beamformer");
  check_len(thetas.size(), ch.K(), "RIS configuration count");
  if (!paths.ris.empty()) check_len(paths.ris.size(), ch.K(), "path selection");

  CVector g(M);
  if (paths.direct) g = ch.h_d;
  for (std::size_t k = 0; k < ch.K(); ++k) {
    if (!paths.ris.empty() && !paths.ris[k]) continue;
    const CVector& h = ch.h_r[k];
    const CMatrix& G = ch.G_r[k];
    check_len(thetas[k].size(), h.size(), "RIS configuration");
    if (G.rows() != M || G.cols() != h.size()) {
      throw InvalidArgument("measure_pilot: G_r shape does not match h_d / h_r");
    }
    for (std::size_t m = 0; m < M; ++m) {
      Complex acc{};
      for (std::size_t n = 0; n < h.size(); ++n) acc += G(m, n) * h[n] * thetas[k][n];
      g[m] += acc;
    }
  }
  Complex y{};
  for (std::size_t m = 0; m < M; ++m) y += w[m] * g[m];
  return y;
}

}  // namespace

Complex measure_pilot(const ChannelRealization& ch, std::span<const Complex> w,
                      std::span<const CVector> thetas, const PilotConfig& cfg, Complex noise) {
  return std::sqrt(cfg.p_u) * combine(ch, w, thetas, PathSelection{}) * cfg.pilot_symbol + noise;
}

GridSpec GridSpec::covering(const ServiceArea& area, double resolution) {
  if (!(resolution > 0.0)) throw InvalidArgument("grid: resolution must be > 0");
  GridSpec g;
  g.x_min = area.x_min();
  g.y_min = area.y_min();
  g.z = area.center.z;
  g.resolution = resolution;
  g.nx = static_cast<std::size_t>(std::llround(2.0 * area.half_x / resolution));
  g.ny = static_cast<std::size_t>(std::llround(2.0 * area.half_y / resolution));
  return g;
}

Position GridSpec::cell_center(std::size_t ix, std::size_t iy) const {
  return {x_min + (static_cast<double>(ix) + 0.5) * resolution,
          y_min + (static_cast<double>(iy) + 0.5) * resolution, z};
}

Complex los_field(const SystemLayout& layout, const Position& ue, std::span<const Complex> w,
                  std::span<const CVector> thetas, const PilotConfig& cfg,
                  const PathSelection& paths) {
  const ChannelRealization ch = los_channel(layout, ue);
  return std::sqrt(cfg.p_u) * combine(ch, w, thetas, paths) * cfg.pilot_symbol;
}

RssGrid rss_map(const SystemLayout& layout, std::span<const Complex> w,
                std::span<const CVector> thetas, const GridSpec& grid, const PilotConfig& cfg,
                const PathSelection& paths) {
  if (grid.nx == 0 || grid.ny == 0) throw InvalidArgument("rss_map: empty grid");
  RssGrid out{grid, std::vector<double>(grid.nx * grid.ny)};
  for (std::size_t ix = 0; ix < grid.nx; ++ix) {
    for (std::size_t iy = 0; iy < grid.ny; ++iy) {
      out.values[ix * grid.ny + iy] =
          std::norm(los_field(layout, grid.cell_center(ix, iy), w, thetas, cfg, paths));
    }
  }
  return out;
}

}  // namespace vqc
