// SPDX-License-Identifier: Apache-2.0

#include "uqloc/scene.hpp"

#include "uqloc/keyvalue.hpp"
#include "uqloc/random.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace uqloc {

namespace {

double cross(const Eigen::Vector2d &a, const Eigen::Vector2d &b)
{
    return a.x() * b.y() - a.y() * b.x();
}

int orientation(const Eigen::Vector2d &p, const Eigen::Vector2d &q, const Eigen::Vector2d &r)
{
    const double v = cross(q - p, r - p);
    return (v > 0) - (v < 0);
}

bool on_segment(const Eigen::Vector2d &p, const Eigen::Vector2d &q, const Eigen::Vector2d &r)
{
    return std::min(p.x(), r.x()) <= q.x() && q.x() <= std::max(p.x(), r.x()) &&
           std::min(p.y(), r.y()) <= q.y() && q.y() <= std::max(p.y(), r.y());
}

Path make_path(const Eigen::Vector3d &bs, double orientation_az, const Eigen::Vector3d &apparent_source,
               const PathGainModel &model, double loss, bool direct)
{
    const Eigen::Vector3d d = apparent_source - bs;
    const double dist = d.norm();
    const double c = std::cos(orientation_az);
    const double s = std::sin(orientation_az);
    const double lx = c * d.x() + s * d.y();
    const double ly = -s * d.x() + c * d.y();

    Path p;
    p.gain = model.reference_gain * std::pow(dist, -model.exponent) * loss;
    p.delay = dist / kSpeedOfLight;
    p.azimuth = std::atan2(ly, lx);
    p.elevation = std::acos(std::clamp(d.z() / dist, -1.0, 1.0));
    p.direct = direct;
    return p;
}

Segment2 segment_from(const std::vector<double> &t)
{
    return {Eigen::Vector2d(t[0], t[1]), Eigen::Vector2d(t[2], t[3])};
}

} // namespace

void SceneSpec::validate() const
{
    auto require = [](bool ok, const char *key, const char *msg) {
        if (!ok)
            throw ConfigError(key, std::string("scene: key '") + key + "': " + msg);
    };
    require(carrier_frequency > 0, "carrier_frequency", "must be positive");
    require(bandwidth > 0, "bandwidth", "must be positive");
    require(m_y >= 1, "m_y", "must be at least 1");
    require(m_z >= 1, "m_z", "must be at least 1");
    require(n_subcarriers >= 1, "n_subcarriers", "must be at least 1");
    require(n_paths_max >= 1, "n_paths_max", "must be at least 1");
    require(grid.rows >= 1, "grid_rows", "must be at least 1");
    require(grid.cols >= 1, "grid_cols", "must be at least 1");
    require(grid.spacing > 0, "grid_spacing", "must be positive");
    require(gain.reference_gain > 0, "gain_reference", "must be positive");
    require(std::isfinite(gain.exponent), "path_loss_exponent", "must be finite");
    require(roughness_length > 0, "roughness_length", "must be positive");
    for (const auto &b : blockers)
        require(b.height > 0, "blockers", "blocker height must be positive");
    for (const auto &r : reflectors) {
        require(r.loss > 0 && r.loss <= 1, "reflectors", "reflection loss must lie in (0, 1]");
        require(r.roughness >= 0 && r.roughness < 1, "reflectors", "roughness must lie in [0, 1)");
        require((r.segment.b - r.segment.a).norm() > 0, "reflectors", "degenerate reflector segment");
    }
}

Eigen::VectorXcd channel_vector(const PathSet &paths, const SceneSpec &spec, int subcarrier_index)
{
    if (paths.paths.empty())
        throw std::invalid_argument("channel_vector: empty path set");
    if (subcarrier_index < 1 || subcarrier_index > spec.n_subcarriers)
        throw std::invalid_argument("channel_vector: subcarrier index out of range");

    const double n_sc = spec.n_subcarriers;
    const double phase_rate = 2.0 * std::numbers::pi * subcarrier_index / n_sc * spec.bandwidth;
    Eigen::VectorXcd h = Eigen::VectorXcd::Zero(spec.antennas());
    for (const auto &p : paths.paths) {
        if (!std::isfinite(p.gain) || !std::isfinite(p.delay) || p.gain < 0)
            throw std::invalid_argument("channel_vector: path gain and delay must be finite, gain >= 0");
        const std::complex<double> coeff = std::polar(std::sqrt(p.gain / n_sc), phase_rate * p.delay);
        h += coeff * array_response(p.azimuth, p.elevation, spec.m_y, spec.m_z);
    }
    return h;
}

bool segments_intersect(const Eigen::Vector2d &p0, const Eigen::Vector2d &p1,
                        const Eigen::Vector2d &q0, const Eigen::Vector2d &q1)
{
    const int o1 = orientation(p0, p1, q0);
    const int o2 = orientation(p0, p1, q1);
    const int o3 = orientation(q0, q1, p0);
    const int o4 = orientation(q0, q1, p1);
    if (o1 != o2 && o3 != o4)
        return true;
    if (o1 == 0 && on_segment(p0, q0, p1))
        return true;
    if (o2 == 0 && on_segment(p0, q1, p1))
        return true;
    if (o3 == 0 && on_segment(q0, p0, q1))
        return true;
    if (o4 == 0 && on_segment(q0, p1, q1))
        return true;
    return false;
}

bool is_obstructed(const Eigen::Vector3d &from, const Eigen::Vector3d &to,
                   const std::vector<Blocker> &blockers)
{
    const Eigen::Vector2d p0 = from.head<2>();
    const Eigen::Vector2d p1 = to.head<2>();
    const Eigen::Vector2d r = p1 - p0;
    for (const auto &b : blockers) {
        const Eigen::Vector2d &q0 = b.segment.a;
        const Eigen::Vector2d &q1 = b.segment.b;
        if (!segments_intersect(p0, p1, q0, q1))
            continue;
        const double denom = cross(r, q1 - q0);
        // Collinear overlap with a screen is treated as blocked.
        if (denom == 0.0)
            return true;
        const double t = std::clamp(cross(q0 - p0, q1 - q0) / denom, 0.0, 1.0);
        const double z = from.z() + t * (to.z() - from.z());
        if (z <= b.height)
            return true;
    }
    return false;
}

double reflection_loss(const SceneSpec &spec, std::size_t index, double s)
{
    const Reflector &r = spec.reflectors.at(index);
    if (r.roughness == 0.0)
        return r.loss;
    const double t = std::max(s, 0.0) / spec.roughness_length;
    const auto k = static_cast<std::uint64_t>(std::floor(t));
    const double frac = t - static_cast<double>(k);
    auto knot = [&](std::uint64_t i) {
        return static_cast<double>(derive_seed(spec.rng_seed, "roughness", {index, i}) >> 11) * 0x1.0p-53;
    };
    const double u = (1.0 - frac) * knot(k) + frac * knot(k + 1);
    return r.loss * (1.0 - r.roughness * u);
}

PathSet trace_paths(const Eigen::Vector2d &user_pos, const SceneSpec &spec)
{
    const Eigen::Vector3d bs = spec.bs_position;
    const Eigen::Vector3d ue(user_pos.x(), user_pos.y(), spec.grid.height);

    PathSet out;
    if (!is_obstructed(bs, ue, spec.blockers)) {
        out.los = true;
        out.paths.push_back(make_path(bs, spec.bs_orientation, ue, spec.gain, 1.0, true));
    }

    const Eigen::Vector2d bs2 = bs.head<2>();
    for (std::size_t ri = 0; ri < spec.reflectors.size(); ++ri) {
        const Reflector &refl = spec.reflectors[ri];
        const Eigen::Vector2d a = refl.segment.a;
        const Eigen::Vector2d along = refl.segment.b - a;
        const double len = along.norm();
        const Eigen::Vector2d u = along / len;
        const Eigen::Vector2d n(-u.y(), u.x());
        const double side_bs = n.dot(bs2 - a);
        const double side_ue = n.dot(user_pos - a);
        if (side_bs * side_ue <= 0)
            continue;

        const Eigen::Vector2d image = user_pos - 2.0 * side_ue * n;
        const double t = side_bs / (side_bs + side_ue);
        const Eigen::Vector2d hit = bs2 + t * (image - bs2);
        const double s = u.dot(hit - a) / len;
        if (s < 0 || s > 1)
            continue;

        const Eigen::Vector3d bounce(hit.x(), hit.y(), bs.z() + t * (ue.z() - bs.z()));
        if (is_obstructed(bs, bounce, spec.blockers) || is_obstructed(bounce, ue, spec.blockers))
            continue;
        const Eigen::Vector3d image3(image.x(), image.y(), ue.z());
        out.paths.push_back(make_path(bs, spec.bs_orientation, image3, spec.gain,
                                       reflection_loss(spec, ri, s * len), false));
    }

    std::stable_sort(out.paths.begin(), out.paths.end(),
                     [](const Path &l, const Path &r) { return l.gain > r.gain; });
    if (out.paths.size() > static_cast<std::size_t>(spec.n_paths_max))
        out.paths.resize(spec.n_paths_max);
    return out;
}

std::vector<CsiSample> generate_dataset(const SceneSpec &spec, int subcarrier_index, DatasetStats *stats)
{
    spec.validate();
    const int m = spec.antennas();
    DatasetStats st;
    std::vector<CsiSample> out;
    out.reserve(static_cast<std::size_t>(spec.grid.rows) * spec.grid.cols);
    for (int row = 0; row < spec.grid.rows; ++row) {
        for (int col = 0; col < spec.grid.cols; ++col) {
            ++st.grid_users;
            const Eigen::Vector2d pos = spec.grid.position(row, col);
            const PathSet paths = trace_paths(pos, spec);
            if (!paths.covered()) {
                ++st.dropped_users;
                continue;
            }
            const Eigen::VectorXcd h = channel_vector(paths, spec, subcarrier_index);
            CsiSample s;
            s.features.resize(2 * m);
            s.features.head(m) = h.real();
            s.features.tail(m) = h.imag();
            s.position = pos;
            s.los = paths.los;
            s.location_id = static_cast<std::int64_t>(row) * spec.grid.cols + col;
            st.los_users += s.los;
            out.push_back(std::move(s));
        }
    }
    if (stats)
        *stats = st;
    if (out.empty())
        throw std::runtime_error("generate_dataset: no grid user has a propagation path (zero coverage)");
    return out;
}

SceneSpec parse_scene(const KeyValueFile &kv)
{
    SceneSpec s;
    s.carrier_frequency = kv.number("carrier_frequency");
    s.bandwidth = kv.number("bandwidth");
    s.m_y = static_cast<int>(kv.integer("m_y"));
    s.m_z = static_cast<int>(kv.integer("m_z"));
    s.n_subcarriers = static_cast<int>(kv.integer("n_subcarriers"));
    s.n_paths_max = static_cast<int>(kv.integer("n_paths_max"));

    const auto bs = kv.numbers("bs_position");
    if (bs.size() != 3)
        throw ConfigError("bs_position", kv.source() + ": key 'bs_position': expected (x, y, z)");
    s.bs_position = Eigen::Vector3d(bs[0], bs[1], bs[2]);
    s.bs_orientation = kv.number_or("bs_orientation", 0.0);

    const auto origin = kv.numbers("grid_origin");
    if (origin.size() != 2)
        throw ConfigError("grid_origin", kv.source() + ": key 'grid_origin': expected (x, y)");
    s.grid.origin = Eigen::Vector2d(origin[0], origin[1]);
    s.grid.rows = static_cast<int>(kv.integer("grid_rows"));
    s.grid.cols = static_cast<int>(kv.integer("grid_cols"));
    s.grid.spacing = kv.number("grid_spacing");
    s.grid.height = kv.number("grid_height");

    if (kv.has("blockers") && !kv.text("blockers").empty()) {
        for (const auto &t : kv.tuples("blockers")) {
            if (t.size() != 5)
                throw ConfigError("blockers", kv.source() + ": key 'blockers': expected (x0, y0, x1, y1, height)");
            s.blockers.push_back({segment_from(t), t[4]});
        }
    }
    if (kv.has("reflectors") && !kv.text("reflectors").empty()) {
        for (const auto &t : kv.tuples("reflectors")) {
            if (t.size() != 5 && t.size() != 6)
                throw ConfigError("reflectors",
                                  kv.source() + ": key 'reflectors': expected (x0, y0, x1, y1, loss[, roughness])");
            s.reflectors.push_back({segment_from(t), t[4], t.size() == 6 ? t[5] : 0.0});
        }
    }
    s.gain.reference_gain = kv.number("gain_reference");
    s.gain.exponent = kv.number("path_loss_exponent");
    s.roughness_length = kv.number_or("roughness_length", 1.0);
    s.rng_seed = static_cast<std::uint64_t>(kv.integer_or("rng_seed", 0));
    s.validate();
    return s;
}

SceneSpec load_scene(const std::filesystem::path &path)
{
    return parse_scene(KeyValueFile::load(path));
}

std::string scene_to_text(const SceneSpec &s)
{
    auto tuple = [](std::initializer_list<double> v) {
        std::string out = "(";
        bool first = true;
        for (double x : v) {
            if (!first)
                out += ", ";
            out += format_double(x);
            first = false;
        }
        return out + ")";
    };
    std::string blockers, reflectors;
    for (const auto &b : s.blockers) {
        if (!blockers.empty())
            blockers += ", ";
        blockers += tuple({b.segment.a.x(), b.segment.a.y(), b.segment.b.x(), b.segment.b.y(), b.height});
    }
    for (const auto &r : s.reflectors) {
        if (!reflectors.empty())
            reflectors += ", ";
        reflectors += tuple({r.segment.a.x(), r.segment.a.y(), r.segment.b.x(), r.segment.b.y(), r.loss, r.roughness});
    }
    KeyValueWriter w;
    w.put("carrier_frequency", s.carrier_frequency)
        .put("bandwidth", s.bandwidth)
        .put("m_y", std::int64_t{s.m_y})
        .put("m_z", std::int64_t{s.m_z})
        .put("n_subcarriers", std::int64_t{s.n_subcarriers})
        .put("n_paths_max", std::int64_t{s.n_paths_max})
        .put("bs_position", std::vector<double>{s.bs_position.x(), s.bs_position.y(), s.bs_position.z()})
        .put("bs_orientation", s.bs_orientation)
        .put("grid_origin", std::vector<double>{s.grid.origin.x(), s.grid.origin.y()})
        .put("grid_rows", std::int64_t{s.grid.rows})
        .put("grid_cols", std::int64_t{s.grid.cols})
        .put("grid_spacing", s.grid.spacing)
        .put("grid_height", s.grid.height)
        .put("blockers", std::string_view(blockers))
        .put("reflectors", std::string_view(reflectors))
        .put("gain_reference", s.gain.reference_gain)
        .put("path_loss_exponent", s.gain.exponent)
        .put("roughness_length", s.roughness_length)
        .put("rng_seed", static_cast<std::int64_t>(s.rng_seed));
    return w.str();
}

std::string dataset_to_text(const std::vector<CsiSample> &samples)
{
    const Eigen::Index width = samples.empty() ? 0 : samples.front().features.size();
    std::string out = "uqloc-csi v1, M=" + std::to_string(width / 2) + ", N=" + std::to_string(samples.size()) + "\n";
    out.reserve(samples.size() * static_cast<std::size_t>(width + 4) * 24);
    for (const auto &s : samples) {
        if (s.features.size() != width)
            throw std::invalid_argument("dataset_to_text: inconsistent feature width");
        out += std::to_string(s.location_id);
        out += ',';
        out += format_double(s.position.x());
        out += ',';
        out += format_double(s.position.y());
        out += s.los ? ",1" : ",0";
        for (Eigen::Index i = 0; i < width; ++i) {
            out += ',';
            out += format_double(s.features(i));
        }
        out += '\n';
    }
    return out;
}

std::vector<CsiSample> dataset_from_text(std::string_view text)
{
    auto fail = [](std::size_t line, const std::string &msg) -> void {
        throw std::runtime_error("dataset line " + std::to_string(line) + ": " + msg);
    };
    const auto header_end = text.find('\n');
    const std::string_view header = text.substr(0, header_end);
    long m = -1, n = -1;
    {
        const std::string h(header);
        if (std::sscanf(h.c_str(), "uqloc-csi v1, M=%ld, N=%ld", &m, &n) != 2 || m < 1 || n < 0)
            fail(1, "bad header, expected 'uqloc-csi v1, M=<int>, N=<int>'");
    }

    std::vector<CsiSample> out;
    out.reserve(static_cast<std::size_t>(n));
    std::size_t pos = header_end == std::string_view::npos ? text.size() : header_end + 1;
    std::size_t line_no = 1;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos)
            end = text.size();
        ++line_no;
        const char *p = text.data() + pos;
        const char *const stop = text.data() + end;
        pos = end + 1;
        if (p == stop)
            continue;

        auto next_double = [&](double &v) {
            auto [ptr, ec] = std::from_chars(p, stop, v);
            if (ec != std::errc())
                fail(line_no, "malformed number");
            p = ptr;
            if (p != stop) {
                if (*p != ',')
                    fail(line_no, "expected ','");
                ++p;
            }
        };
        CsiSample s;
        {
            auto [ptr, ec] = std::from_chars(p, stop, s.location_id);
            if (ec != std::errc() || ptr == stop || *ptr != ',')
                fail(line_no, "malformed location_id");
            p = ptr + 1;
        }
        double x = 0, y = 0, los = 0;
        next_double(x);
        next_double(y);
        next_double(los);
        s.position = Eigen::Vector2d(x, y);
        s.los = los != 0.0;
        s.features.resize(2 * m);
        for (long i = 0; i < 2 * m; ++i) {
            if (p == stop)
                fail(line_no, "expected " + std::to_string(2 * m) + " features");
            next_double(s.features(i));
        }
        if (p != stop)
            fail(line_no, "trailing fields");
        out.push_back(std::move(s));
    }
    if (static_cast<long>(out.size()) != n)
        fail(line_no, "header announces N=" + std::to_string(n) + " records, found " + std::to_string(out.size()));
    return out;
}

void write_dataset(const std::filesystem::path &path, const std::vector<CsiSample> &samples)
{
    write_text_file(path, dataset_to_text(samples));
}

std::vector<CsiSample> read_dataset(const std::filesystem::path &path)
{
    return dataset_from_text(read_text_file(path));
}

} // namespace uqloc
