// SPDX-License-Identifier: Apache-2.0
//
// Synthetic massive-MIMO scene: a base station with a uniform planar array,
// blocking screens and flat reflectors over a grid of single-antenna users.
// Paths are traced geometrically (direct ray plus one mirror-image bounce per
// reflector) and turned into narrowband CSI through the multipath UPA model.

#ifndef UQLOC_SCENE_HPP
#define UQLOC_SCENE_HPP

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace uqloc {

class KeyValueFile;

inline constexpr double kSpeedOfLight = 299792458.0;

struct Segment2
{
    Eigen::Vector2d a;
    Eigen::Vector2d b;
};

struct Blocker
{
    Segment2 segment;
    double height = 0.0;
};

struct Reflector
{
    Segment2 segment;
    double loss = 1.0;      // power multiplier in (0, 1]
    double roughness = 0.0; // in [0, 1): depth of the seeded loss variation along the wall
};

struct UserGrid
{
    Eigen::Vector2d origin = Eigen::Vector2d::Zero();
    int rows = 1; // along y
    int cols = 1; // along x
    double spacing = 1.0;
    double height = 1.5;

    Eigen::Vector2d position(int row, int col) const
    {
        return origin + spacing * Eigen::Vector2d(col, row);
    }
    Eigen::Vector2d lower() const { return origin; }
    Eigen::Vector2d upper() const { return position(rows - 1, cols - 1); }
};

struct PathGainModel
{
    double reference_gain = 1.0;
    double exponent = 2.5;
};

struct SceneSpec
{
    double carrier_frequency = 3.5e9;
    double bandwidth = 20e6;
    int m_y = 16;
    int m_z = 8;
    int n_subcarriers = 1024;
    int n_paths_max = 5;
    Eigen::Vector3d bs_position = Eigen::Vector3d(0, 0, 6);
    double bs_orientation = 0.0; // azimuth of the array broadside
    UserGrid grid;
    std::vector<Blocker> blockers;
    std::vector<Reflector> reflectors;
    PathGainModel gain;
    double roughness_length = 1.0; // meters between roughness knots
    std::uint64_t rng_seed = 0;

    int antennas() const { return m_y * m_z; }
    double wavelength() const { return kSpeedOfLight / carrier_frequency; }
    // Element spacing is always half a wavelength.
    double element_spacing() const { return 0.5 * wavelength(); }

    void validate() const;
};

struct Path
{
    double gain = 0.0;  // linear power
    double delay = 0.0; // seconds
    double azimuth = 0.0;
    double elevation = 0.0; // from +z
    bool direct = false;
};

struct PathSet
{
    std::vector<Path> paths;
    bool los = false;

    // False for a fully shadowed user; such users carry no CSI.
    bool covered() const { return !paths.empty(); }
};

struct CsiSample
{
    Eigen::VectorXd features; // [Re(h); Im(h)], length 2M
    Eigen::Vector2d position = Eigen::Vector2d::Zero();
    bool los = false;
    std::int64_t location_id = 0;
};

template <typename Scalar>
using ComplexVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;

// Horizontal ULA response: element p has phase pi * p * sin(el) * sin(az).
template <typename Scalar>
ComplexVector<Scalar> steering_vector_y(Scalar phi_az, Scalar phi_el, Eigen::Index m_y)
{
    using std::sin;
    const Scalar pi = std::numbers::pi_v<Scalar>;
    const Scalar step = pi * sin(phi_el) * sin(phi_az);
    ComplexVector<Scalar> a(m_y);
    for (Eigen::Index p = 0; p < m_y; ++p)
        a(p) = std::polar(Scalar(1), step * Scalar(p));
    return a;
}

// Vertical ULA response: element q has phase pi * q * cos(el).
template <typename Scalar>
ComplexVector<Scalar> steering_vector_z(Scalar phi_el, Eigen::Index m_z)
{
    using std::cos;
    const Scalar pi = std::numbers::pi_v<Scalar>;
    const Scalar step = pi * cos(phi_el);
    ComplexVector<Scalar> a(m_z);
    for (Eigen::Index q = 0; q < m_z; ++q)
        a(q) = std::polar(Scalar(1), step * Scalar(q));
    return a;
}

// a_z (outer) kron a_y (inner): entry q * m_y + p.
template <typename Scalar>
ComplexVector<Scalar> array_response(Scalar phi_az, Scalar phi_el, Eigen::Index m_y, Eigen::Index m_z)
{
    const auto ay = steering_vector_y(phi_az, phi_el, m_y);
    const auto az = steering_vector_z(phi_el, m_z);
    ComplexVector<Scalar> a(m_y * m_z);
    for (Eigen::Index q = 0; q < m_z; ++q)
        a.segment(q * m_y, m_y) = az(q) * ay;
    return a;
}

// Narrowband channel on subcarrier n (1-based) for the given paths.
Eigen::VectorXcd channel_vector(const PathSet &paths, const SceneSpec &spec, int subcarrier_index);

// True if the 2-D segments [p0,p1] and [q0,q1] share at least one point.
bool segments_intersect(const Eigen::Vector2d &p0, const Eigen::Vector2d &p1,
                        const Eigen::Vector2d &q0, const Eigen::Vector2d &q1);

// True if the 3-D ray from `from` to `to` passes through any blocker.
bool is_obstructed(const Eigen::Vector3d &from, const Eigen::Vector3d &to,
                   const std::vector<Blocker> &blockers);

// Power multiplier of reflector `index` at arc length `s` from its first
// endpoint: loss * (1 - roughness * u(s)), with u piecewise linear between
// seeded uniform knots. Equals `loss` for a smooth reflector.
double reflection_loss(const SceneSpec &spec, std::size_t index, double s);

PathSet trace_paths(const Eigen::Vector2d &user_pos, const SceneSpec &spec);

struct DatasetStats
{
    std::size_t grid_users = 0;
    std::size_t dropped_users = 0;
    std::size_t los_users = 0;
};

// One sample per covered grid user, in row-major grid order.
std::vector<CsiSample> generate_dataset(const SceneSpec &spec, int subcarrier_index = 1,
                                        DatasetStats *stats = nullptr);

SceneSpec parse_scene(const KeyValueFile &kv);
SceneSpec load_scene(const std::filesystem::path &path);
std::string scene_to_text(const SceneSpec &spec);

// `uqloc-csi v1, M=<int>, N=<int>` followed by one CSV record per sample.
std::string dataset_to_text(const std::vector<CsiSample> &samples);
std::vector<CsiSample> dataset_from_text(std::string_view text);
void write_dataset(const std::filesystem::path &path, const std::vector<CsiSample> &samples);
std::vector<CsiSample> read_dataset(const std::filesystem::path &path);

} // namespace uqloc

#endif
