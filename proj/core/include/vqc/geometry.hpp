#pragma once

// Geometry-to-channel pipeline for an RIS-assisted uplink and the pilot
// measurement the base station observes after analog combining.

#include <span>
#include <vector>

#include "vqc/types.hpp"

namespace vqc {

struct Position {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

double distance(const Position& a, const Position& b);

/// Axis-aligned rectangle on a horizontal plane at height center.z.
struct ServiceArea {
  Position center;
  double half_x = 0.0;
  double half_y = 0.0;

  double x_min() const { return center.x - half_x; }
  double x_max() const { return center.x + half_x; }
  double y_min() const { return center.y - half_y; }
  double y_max() const { return center.y + half_y; }
  bool contains(const Position& p) const;
};

struct SystemLayout {
  Position bs_position;
  std::vector<Position> ris_positions;
  std::size_t M = 1;  // BS antennas
  std::size_t N = 1;  // elements per RIS
  std::size_t C = 1;  // RIS columns
  double spacing_ris = 1.0;  // 2*pi*d_R / lambda_c
  double spacing_bs = 1.0;   // 2*pi*d_A / lambda_c
  ServiceArea service_area;

  std::size_t K() const { return ris_positions.size(); }
  /// Every problem found, one message per field (K = 0, C not dividing N, ...).
  std::vector<std::string> problems() const;
  /// Throws InvalidArgument listing problems() when there are any.
  void validate() const;
};

/// Arrival/departure angles (radians) and ranges (meters) for one RIS.
struct AngleSet {
  double mu_ris = 0.0;       // azimuth AoA, UE -> RIS
  double gamma_ris = 0.0;    // elevation AoA, UE -> RIS
  double phi_ris = 0.0;      // azimuth AoD, RIS -> BS
  double upsilon_ris = 0.0;  // elevation AoD, RIS -> BS
  double gamma_bs = 0.0;     // elevation AoA, RIS -> BS
  double gamma_ue = 0.0;     // elevation AoA, UE -> BS
  double r_ur = 0.0;         // UE-RIS range
  double r_rb = 0.0;         // RIS-BS range
  double r_ub = 0.0;         // UE-BS range
};

AngleSet compute_angles(const SystemLayout& layout, const Position& ue, std::size_t k);

/// Planar-array response; element n (0-based) has phase
/// spacing * (mod(n, C) sin(mu) cos(gamma) + floor(n / C) sin(gamma)).
CVector ris_steering(double mu, double gamma, std::size_t N, std::size_t C, double spacing);

/// Uniform linear array response; element m has phase spacing * m * cos(gamma).
CVector bs_steering(double gamma, std::size_t M, double spacing);

enum class PathKind { direct, reflected };

double path_loss_db(PathKind kind, double distance_m);
/// Linear amplitude 10^(-PL_dB / 20).
double path_loss_amplitude(PathKind kind, double distance_m);

struct ChannelRealization {
  CVector h_d;                // M
  std::vector<CVector> h_r;   // K x N
  std::vector<CMatrix> G_r;   // K x (M x N)
  double rho = 0.0;
  std::vector<double> kappa;
  std::vector<double> xi;
  double epsilon = 0.0;

  std::size_t K() const { return h_r.size(); }
};

/// Rician draw. NLOS entries are CN(0, 1); epsilon = 0 gives pure scaled NLOS.
ChannelRealization sample_channel(const SystemLayout& layout, const Position& ue, double epsilon,
                                  Rng& rng);

/// Deterministic path-loss-scaled LOS channel (the epsilon -> infinity limit).
ChannelRealization los_channel(const SystemLayout& layout, const Position& ue);

/// diag(h_r) * G_r^T, an N x M matrix.
CMatrix cascade_channel(const CVector& h_r, const CMatrix& G_r);

struct PilotConfig {
  double p_u = 1.0;     // uplink transmit power, linear
  double sigma2 = 0.0;  // noise power, linear
  Complex pilot_symbol{1.0, 0.0};

  /// P_u = 10^(snr_db / 10) and sigma2 = 10^((noise_dbm - 30) / 10), both in W.
  static PilotConfig from_snr_db(double snr_db, double noise_dbm = -100.0);
  void validate() const;
};

/// sqrt(P_u) * w^T (h_d + sum_k H_c,k^T theta_k) * x + noise.
Complex measure_pilot(const ChannelRealization& ch, std::span<const Complex> w,
                      std::span<const CVector> thetas, const PilotConfig& cfg, Complex noise);

/// Which paths contribute to a radio map cell.
struct PathSelection {
  bool direct = true;
  std::vector<bool> ris;  // empty = all RISs
};

/// Cell-centered grid over the service area.
struct GridSpec {
  double x_min = 0.0;
  double y_min = 0.0;
  double z = 0.0;
  std::size_t nx = 0;
  std::size_t ny = 0;
  double resolution = 1.0;

  static GridSpec covering(const ServiceArea& area, double resolution = 1.0);
  Position cell_center(std::size_t ix, std::size_t iy) const;
};

/// Row-major nx x ny matrix of received signal strength.
struct RssGrid {
  GridSpec grid;
  std::vector<double> values;

  double at(std::size_t ix, std::size_t iy) const { return values[ix * grid.ny + iy]; }
};

/// Noise-free received field at one UE position under the LOS-only channel.
Complex los_field(const SystemLayout& layout, const Position& ue, std::span<const Complex> w,
                  std::span<const CVector> thetas, const PilotConfig& cfg,
                  const PathSelection& paths);

RssGrid rss_map(const SystemLayout& layout, std::span<const Complex> w,
                std::span<const CVector> thetas, const GridSpec& grid, const PilotConfig& cfg,
                const PathSelection& paths = {});

}  // namespace vqc
