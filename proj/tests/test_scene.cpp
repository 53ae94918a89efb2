// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "uqloc/keyvalue.hpp"
#include "uqloc/random.hpp"
#include "uqloc/scene.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <numbers>

using namespace uqloc;
using cd = std::complex<double>;

namespace {

constexpr double pi = std::numbers::pi;

SceneSpec open_scene()
{
    SceneSpec s;
    s.m_y = 4;
    s.m_z = 2;
    s.n_subcarriers = 64;
    s.bs_position = {0, 0, 6};
    s.grid.origin = {10, -2};
    s.grid.rows = 5;
    s.grid.cols = 5;
    s.grid.spacing = 1.0;
    return s;
}

// Crossing of two 2-D segments by solving p0 + t r = q0 + u s directly.
bool oracle_blocked(const Eigen::Vector3d &from, const Eigen::Vector3d &to, const Blocker &b)
{
    Eigen::Matrix2d a;
    a.col(0) = (to - from).head<2>();
    a.col(1) = b.segment.a - b.segment.b;
    const Eigen::Vector2d rhs = b.segment.a - from.head<2>();
    const Eigen::Vector2d tu = a.fullPivLu().solve(rhs);
    if (tu(0) < 0 || tu(0) > 1 || tu(1) < 0 || tu(1) > 1)
        return false;
    return from.z() + tu(0) * (to.z() - from.z()) <= b.height;
}

} // namespace

TEST_CASE("steering vectors")
{
    auto y = steering_vector_y(pi / 2, pi / 2, 2);
    CHECK(std::abs(y(0) - cd(1, 0)) < 1e-12);
    CHECK(std::abs(y(1) - cd(-1, 0)) < 1e-12);

    y = steering_vector_y(0.0, 0.7, 4);
    for (int i = 0; i < 4; ++i)
        CHECK(std::abs(y(i) - cd(1, 0)) < 1e-12);
    CHECK(steering_vector_y(pi / 2, pi / 2, 1).size() == 1);

    auto z = steering_vector_z(pi / 2, 4);
    for (int i = 0; i < 4; ++i)
        CHECK(std::abs(z(i) - cd(1, 0)) < 1e-12);
    z = steering_vector_z(0.0, 2);
    CHECK(std::abs(z(1) - cd(-1, 0)) < 1e-12);
    CHECK(std::abs(steering_vector_z(pi / 3, 1)(0) - cd(1, 0)) < 1e-12);
}

TEST_CASE("array response")
{
    const auto a = array_response(pi / 2, pi / 2, 2, 2);
    const cd expected[] = {1, -1, 1, -1};
    for (int i = 0; i < 4; ++i)
        CHECK(std::abs(a(i) - expected[i]) < 1e-12);
    CHECK(std::abs(array_response(1.1, 0.3, 1, 1)(0) - cd(1, 0)) < 1e-12);

    Rng rng(5);
    std::uniform_real_distribution<double> ang(-pi, pi);
    for (int trial = 0; trial < 50; ++trial) {
        const double az = ang(rng);
        const double el = ang(rng);
        for (int my = 1; my <= 4; ++my) {
            for (int mz = 1; mz <= 4; ++mz) {
                const auto r = array_response(az, el, my, mz);
                for (int q = 0; q < mz; ++q) {
                    for (int p = 0; p < my; ++p) {
                        const double phase = pi * p * std::sin(el) * std::sin(az) + pi * q * std::cos(el);
                        REQUIRE(std::abs(r(q * my + p) - std::polar(1.0, phase)) < 1e-12);
                    }
                }
                CHECK((r.cwiseAbs().array() - 1.0).abs().maxCoeff() < 1e-12);
            }
        }
        const auto pos = steering_vector_y(az, el, 6);
        const auto neg = steering_vector_y(-az, el, 6);
        CHECK((pos.conjugate() - neg).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("channel vector")
{
    SceneSpec spec = open_scene();
    spec.m_y = 16;
    spec.m_z = 8;
    spec.n_subcarriers = 1024;

    PathSet one;
    one.paths.push_back({1.0, 3.7e-7, 0.4, 1.2, true});
    const auto h = channel_vector(one, spec, 1);
    CHECK(h.size() == 128);
    CHECK((h.cwiseAbs().array() - 1.0 / 32.0).abs().maxCoeff() < 1e-12);

    PathSet zero = one;
    zero.paths[0].gain = 0.0;
    CHECK(channel_vector(zero, spec, 1).cwiseAbs().maxCoeff() == 0.0);

    PathSet twin;
    twin.paths.push_back({0.5, 0.0, 0.3, 1.4, true});
    twin.paths.push_back({0.5, 0.0, 0.3, 1.4, false});
    const Eigen::VectorXcd expect = 2.0 * std::sqrt(0.5 / 1024.0) * array_response(0.3, 1.4, 16, 8);
    CHECK((channel_vector(twin, spec, 1) - expect).cwiseAbs().maxCoeff() < 1e-12);

    PathSet many;
    Rng rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int l = 0; l < 5; ++l)
        many.paths.push_back({u(rng), 1e-6 * u(rng), 3 * u(rng), 3 * u(rng), false});
    Eigen::VectorXcd sum = Eigen::VectorXcd::Zero(128);
    for (const auto &p : many.paths) {
        PathSet single;
        single.paths.push_back(p);
        sum += channel_vector(single, spec, 7);
    }
    CHECK((sum - channel_vector(many, spec, 7)).cwiseAbs().maxCoeff() < 1e-12);

    PathSet bad = one;
    bad.paths[0].gain = std::nan("");
    CHECK_THROWS_AS(channel_vector(bad, spec, 1), std::invalid_argument);
    bad.paths[0].gain = 1.0;
    bad.paths[0].delay = INFINITY;
    CHECK_THROWS_AS(channel_vector(bad, spec, 1), std::invalid_argument);
    CHECK_THROWS_AS(channel_vector(PathSet{}, spec, 1), std::invalid_argument);
}

TEST_CASE("direct and reflected paths")
{
    SceneSpec spec = open_scene();
    auto ps = trace_paths({10, 0}, spec);
    REQUIRE(ps.paths.size() == 1);
    CHECK(ps.los);
    CHECK(ps.paths[0].direct);
    CHECK(ps.paths[0].delay == doctest::Approx(std::sqrt(100 + 20.25) / kSpeedOfLight).epsilon(1e-14));
    CHECK(ps.paths[0].gain == doctest::Approx(std::pow(120.25, -1.25)).epsilon(1e-12));
    CHECK(ps.paths[0].azimuth == doctest::Approx(0.0));
    CHECK(std::cos(ps.paths[0].elevation) == doctest::Approx(-4.5 / std::sqrt(120.25)));

    spec.blockers.push_back({{{5, -1}, {5, 1}}, 10});
    spec.reflectors.push_back({{{0, 5}, {20, 5}}, 0.3});
    ps = trace_paths({10, 0}, spec);
    REQUIRE(ps.paths.size() == 1);
    CHECK_FALSE(ps.los);
    CHECK_FALSE(ps.paths[0].direct);
    const double d = std::sqrt(100 + 100 + 20.25);
    CHECK(ps.paths[0].delay == doctest::Approx(d / kSpeedOfLight).epsilon(1e-14));
    CHECK(ps.paths[0].gain == doctest::Approx(0.3 * std::pow(d, -2.5)).epsilon(1e-12));
    CHECK(ps.paths[0].azimuth == doctest::Approx(std::atan2(10.0, 10.0)));

    // Short blocker: both ends are above it.
    spec.blockers[0].height = 1.0;
    ps = trace_paths({10, 0}, spec);
    CHECK(ps.los);
    CHECK(ps.paths.size() == 2);
    CHECK(ps.paths[0].gain > ps.paths[1].gain);

    spec.n_paths_max = 1;
    CHECK(trace_paths({10, 0}, spec).paths.size() == 1);

    spec = open_scene();
    spec.blockers.push_back({{{5, -100}, {5, 100}}, 10});
    CHECK_FALSE(trace_paths({10, 0}, spec).covered());
    CHECK_THROWS_AS(generate_dataset(spec), std::runtime_error);
}

TEST_CASE("orientation rotates the local azimuth")
{
    SceneSpec spec = open_scene();
    spec.bs_orientation = 0.5;
    const auto ps = trace_paths({10, 10}, spec);
    CHECK(ps.paths[0].azimuth == doctest::Approx(pi / 4 - 0.5));
}

TEST_CASE("blockage matches an independent crossing oracle")
{
    Rng rng(21);
    std::uniform_real_distribution<double> xy(-10, 10);
    std::uniform_real_distribution<double> h(0, 8);
    int blocked = 0;
    for (int trial = 0; trial < 5000; ++trial) {
        const Eigen::Vector3d from(xy(rng), xy(rng), h(rng));
        const Eigen::Vector3d to(xy(rng), xy(rng), h(rng));
        std::vector<Blocker> bs;
        bool expect = false;
        for (int k = 0; k < 3; ++k) {
            Blocker b{{{xy(rng), xy(rng)}, {xy(rng), xy(rng)}}, h(rng)};
            expect = expect || oracle_blocked(from, to, b);
            bs.push_back(b);
        }
        REQUIRE(is_obstructed(from, to, bs) == expect);
        blocked += expect;
    }
    CHECK(blocked > 500);
    CHECK(segments_intersect({0, 0}, {2, 0}, {1, 0}, {3, 0}));
    CHECK(segments_intersect({0, 0}, {2, 2}, {2, 2}, {3, 0}));
    CHECK_FALSE(segments_intersect({0, 0}, {1, 0}, {0, 1}, {1, 1}));
}

TEST_CASE("reflection roughness")
{
    SceneSpec spec = open_scene();
    spec.reflectors.push_back({{{0, 5}, {20, 5}}, 0.3});
    CHECK(reflection_loss(spec, 0, 3.3) == 0.3);
    spec.reflectors[0].roughness = 0.8;
    spec.roughness_length = 0.5;
    double lo = 1.0;
    double hi = 0.0;
    for (int i = 0; i <= 4000; ++i) {
        const double s = 20.0 * i / 4000;
        const double l = reflection_loss(spec, 0, s);
        REQUIRE(l >= 0.3 * 0.2 - 1e-15);
        REQUIRE(l <= 0.3 + 1e-15);
        lo = std::min(lo, l);
        hi = std::max(hi, l);
        REQUIRE(std::abs(reflection_loss(spec, 0, s + 1e-9) - l) < 1e-6);
    }
    CHECK(hi - lo > 0.15);
    SceneSpec other = spec;
    other.rng_seed = 99;
    CHECK(reflection_loss(other, 0, 3.3) != reflection_loss(spec, 0, 3.3));
}

TEST_CASE("dataset generation")
{
    SceneSpec spec = open_scene();
    spec.m_y = 16;
    spec.m_z = 8;
    spec.grid.rows = 60;
    spec.grid.cols = 60;
    spec.grid.spacing = 0.5;
    spec.grid.origin = {10, -15};
    DatasetStats st;
    const auto data = generate_dataset(spec, 1, &st);
    CHECK(data.size() == 3600);
    CHECK(st.dropped_users == 0);
    CHECK(data.front().features.size() == 256);
    for (const auto &s : data) {
        REQUIRE((s.position.array() >= spec.grid.lower().array()).all());
        REQUIRE((s.position.array() <= spec.grid.upper().array()).all());
    }
    CHECK(data[61].location_id == 61);
    CHECK(data[61].position.isApprox(Eigen::Vector2d(10.5, -14.5)));

    spec.blockers.push_back({{{7, -1.5}, {7, 1.5}}, 8});
    spec.reflectors.push_back({{{0, 20}, {60, 20}}, 0.3, 0.5});
    spec.rng_seed = 4;
    const std::string a = dataset_to_text(generate_dataset(spec));
    const std::string b = dataset_to_text(generate_dataset(spec));
    CHECK(a == b);
    const auto back = dataset_from_text(a);
    CHECK(dataset_to_text(back) == a);
    const auto orig = generate_dataset(spec);
    REQUIRE(back.size() == orig.size());
    CHECK(back[17].features == orig[17].features);
    CHECK(back[17].los == orig[17].los);
}

TEST_CASE("scene files")
{
    const std::string text = "carrier_frequency = 3.5e9\nbandwidth = 20e6\nm_y = 4\nm_z = 2\n"
                             "n_subcarriers = 64\nn_paths_max = 3\nbs_position = 0, 0, 6\n"
                             "grid_origin = 10, -2\ngrid_rows = 3\ngrid_cols = 4\ngrid_spacing = 0.5\n"
                             "grid_height = 1.5\nblockers = (5, -1, 5, 1, 10)\n"
                             "reflectors = (0, 5, 20, 5, 0.3), (0, -5, 20, -5, 0.4, 0.2)\n"
                             "gain_reference = 1\npath_loss_exponent = 2.5\nrng_seed = 3\n";
    const SceneSpec s = parse_scene(KeyValueFile::parse(text));
    CHECK(s.grid.cols == 4);
    CHECK(s.reflectors.size() == 2);
    CHECK(s.reflectors[1].roughness == 0.2);
    CHECK(s.element_spacing() == doctest::Approx(kSpeedOfLight / 3.5e9 / 2));
    const SceneSpec again = parse_scene(KeyValueFile::parse(scene_to_text(s)));
    CHECK(scene_to_text(again) == scene_to_text(s));

    std::string cut = text.substr(0, text.find("m_z")) + text.substr(text.find("n_subcarriers"));
    try {
        parse_scene(KeyValueFile::parse(cut));
        FAIL("missing key accepted");
    } catch (const ConfigError &e) {
        CHECK(e.key() == "m_z");
    }
    std::string bad = text;
    bad.replace(bad.find("m_y = 4"), 7, "m_y = 0");
    try {
        parse_scene(KeyValueFile::parse(bad));
        FAIL("zero antennas accepted");
    } catch (const ConfigError &e) {
        CHECK(e.key() == "m_y");
    }
}
