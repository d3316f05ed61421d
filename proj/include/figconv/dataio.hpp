#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "figconv/geometry.hpp"
#include "figconv/nn.hpp"

namespace figconv {

/// Triangle mesh. Polygons read from OBJ are fan-triangulated on input.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("format: cannot print number");
  return std::string(buf, end);
}

inline bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace detail

/// Reads the v/f subset of ASCII OBJ. Other records and '#' comments are
/// skipped. Face tokens may carry /vt/vn suffixes; negative indices count
/// back from the last vertex read so far.
inline Mesh parse_obj(std::string_view text) {
  Mesh mesh;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
    const auto tok = detail::split_ws(line);
    if (tok.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (tok[0] == "v") {
      if (tok.size() < 4) throw Error(detail::cat("obj line ", line_no, ": vertex needs 3 coordinates"));
      Vec3 v;
      for (int a = 0; a < 3; ++a)
        if (!detail::parse_double(tok[1 + a], v[a]) || !std::isfinite(v[a]))
          throw Error(detail::cat("obj line ", line_no, ": malformed coordinate '", tok[1 + a], "'"));
      mesh.vertices.push_back(v);
    } else if (tok[0] == "f") {
      if (tok.size() < 4) throw Error(detail::cat("obj line ", line_no, ": face needs at least 3 vertices"));
      std::vector<std::uint32_t> idx;
      for (std::size_t k = 1; k < tok.size(); ++k) {
        std::string_view t = tok[k].substr(0, tok[k].find('/'));
        long long i = 0;
        auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), i);
        if (ec != std::errc{} || ptr != t.data() + t.size() || i == 0)
          throw Error(detail::cat("obj line ", line_no, ": malformed vertex index '", tok[k], "'"));
        const long long n = static_cast<long long>(mesh.vertices.size());
        const long long z = i > 0 ? i - 1 : n + i;
        if (z < 0 || z >= n)
          throw Error(detail::cat("obj line ", line_no, ": vertex index ", i, " out of range (", n, " vertices)"));
        idx.push_back(static_cast<std::uint32_t>(z));
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
    if (end == text.size()) break;
  }
  return mesh;
}

inline Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(detail::cat("cannot open mesh file ", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_obj(ss.str());
}

/// OBJ text with shortest round-trip coordinates.
inline std::string write_obj(const Mesh& mesh) {
  std::string out;
  for (const auto& v : mesh.vertices)
    out += "v " + detail::fmt_double(v[0]) + " " + detail::fmt_double(v[1]) + " " + detail::fmt_double(v[2]) + "\n";
  for (const auto& f : mesh.faces)
    out += "f " + std::to_string(f[0] + 1) + " " + std::to_string(f[1] + 1) + " " + std::to_string(f[2] + 1) + "\n";
  return out;
}

struct FaceData {
  std::vector<Vec3> centroids;
  std::vector<Vec3> normals;
  std::vector<double> areas;
};

inline FaceData faces_to_centroids(const Mesh& mesh) {
  FaceData d;
  d.centroids.reserve(mesh.faces.size());
  d.normals.reserve(mesh.faces.size());
  d.areas.reserve(mesh.faces.size());
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    for (auto v : f)
      if (v >= mesh.vertices.size()) throw Error(detail::cat("mesh: face ", i, " references vertex ", v));
    const Vec3 &a = mesh.vertices[f[0]], &b = mesh.vertices[f[1]], &c = mesh.vertices[f[2]];
    const Vec3 n = cross(b - a, c - a);
    const double len = norm(n);
    if (!(len > 0)) throw Error(detail::cat("mesh: face ", i, " has zero area"));
    d.centroids.push_back((a + b + c) * (1.0 / 3.0));
    d.normals.push_back(n * (1.0 / len));
    d.areas.push_back(0.5 * len);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Pressure normalization and drag

struct PressureStats {
  double mean = 0;
  double std = 1;
};

inline PressureStats pressure_stats(std::span<const double> raw) {
  if (raw.empty()) throw Error("normalize_pressure: no values");
  double mean = 0;
  for (double v : raw) mean += v;
  mean /= static_cast<double>(raw.size());
  double var = 0;
  for (double v : raw) var += (v - mean) * (v - mean);
  var /= static_cast<double>(raw.size());
  const double sd = std::sqrt(var);
  if (!(sd > 1e-12)) throw Error(detail::cat("normalize_pressure: standard deviation ", sd, " is too small"));
  return {mean, sd};
}

/// (p - mean) / std with population statistics, either computed here or
/// supplied (e.g. training-set statistics applied to a test set).
inline std::pair<std::vector<double>, PressureStats> normalize_pressure(std::span<const double> raw,
                                                                        std::optional<PressureStats> stats = {}) {
  const PressureStats s = stats ? *stats : pressure_stats(raw);
  if (!(s.std > 0)) throw Error("normalize_pressure: non-positive std in supplied stats");
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - s.mean) / s.std;
  return {std::move(out), s};
}

struct Flow {
  Vec3 direction{1, 0, 0};
  double dynamic_pressure = 1;
  double frontal_area = 1;
};

/// c_d = sum_i p_i A_i (-n_i . u) / (q A).
inline double integrate_drag(std::span<const double> pressure, std::span<const Vec3> normals,
                             std::span<const double> areas, const Flow& flow) {
  if (pressure.size() != normals.size() || pressure.size() != areas.size())
    throw Error("integrate_drag: pressure, normal and area counts differ");
  if (std::abs(norm(flow.direction) - 1.0) > 1e-9) throw Error("integrate_drag: flow direction is not unit length");
  if (!(flow.dynamic_pressure > 0) || !(flow.frontal_area > 0))
    throw Error("integrate_drag: dynamic pressure and frontal area must be positive");
  double f = 0;
  for (std::size_t i = 0; i < pressure.size(); ++i) f += pressure[i] * areas[i] * -dot(normals[i], flow.direction);
  return f / (flow.dynamic_pressure * flow.frontal_area);
}

/// Silhouette area of the mesh seen along `dir`, by rasterizing the projected
/// triangles over their bounding rectangle at res x res pixel centers.
inline double frontal_area(const Mesh& mesh, const Vec3& dir, std::size_t res = 256) {
  if (mesh.faces.empty()) return 0;
  const Vec3 u = dir * (1.0 / norm(dir));
  const Vec3 helper = std::abs(u[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  Vec3 e1 = cross(u, helper);
  e1 = e1 * (1.0 / norm(e1));
  const Vec3 e2 = cross(u, e1);
  std::vector<std::array<double, 2>> p(mesh.vertices.size());
  double lo0 = INFINITY, lo1 = INFINITY, hi0 = -INFINITY, hi1 = -INFINITY;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = {dot(mesh.vertices[i], e1), dot(mesh.vertices[i], e2)};
    lo0 = std::min(lo0, p[i][0]);
    hi0 = std::max(hi0, p[i][0]);
    lo1 = std::min(lo1, p[i][1]);
    hi1 = std::max(hi1, p[i][1]);
  }
  const double w0 = (hi0 - lo0) / static_cast<double>(res), w1 = (hi1 - lo1) / static_cast<double>(res);
  if (!(w0 > 0) || !(w1 > 0)) return 0;
  std::vector<unsigned char> hit(res * res, 0);
  for (const auto& f : mesh.faces) {
    const auto &a = p[f[0]], &b = p[f[1]], &c = p[f[2]];
    const double det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if (det == 0) continue;  // edge-on
    auto px = [&](double x) { return (x - lo0) / w0 - 0.5; };
    auto py = [&](double y) { return (y - lo1) / w1 - 0.5; };
    const auto clampi = [&](double v) { return static_cast<std::size_t>(std::clamp(v, 0.0, double(res - 1))); };
    const std::size_t i0 = clampi(std::ceil(px(std::min({a[0], b[0], c[0]}))));
    const std::size_t i1 = clampi(std::floor(px(std::max({a[0], b[0], c[0]}))));
    const std::size_t j0 = clampi(std::ceil(py(std::min({a[1], b[1], c[1]}))));
    const std::size_t j1 = clampi(std::floor(py(std::max({a[1], b[1], c[1]}))));
    for (std::size_t j = j0; j <= j1; ++j)
      for (std::size_t i = i0; i <= i1; ++i) {
        const double x = lo0 + (static_cast<double>(i) + 0.5) * w0, y = lo1 + (static_cast<double>(j) + 0.5) * w1;
        const double l1 = ((b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y)) / det;
        const double l2 = ((c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y)) / det;
        const double l3 = 1.0 - l1 - l2;
        if (l1 >= 0 && l2 >= 0 && l3 >= 0) hit[j * res + i] = 1;
      }
  }
  std::size_t n = 0;
  for (auto h : hit) n += h;
  return static_cast<double>(n) * w0 * w1;
}

// ---------------------------------------------------------------------------
// Samples

/// One surface: face-centroid points with unit normals and areas, normalized
/// pressure labels, and the drag coefficient.
struct SurfaceSample {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<double> areas;
  std::vector<double> raw_pressure;
  std::vector<double> pressure;  // normalized
  double drag = 0;
  std::optional<double> velocity;
  PressureStats stats;
};

/// Shape parameters of the synthetic body: a box of length L (along the flow,
/// +x), width W (y) and height H (z) lifted by ground clearance g, whose
/// front-top edge is cut by a slant of angle alpha spanning 20% of the length.
struct BodyParams {
  double length = 1.0, width = 0.4, height = 0.3, slant_deg = 0.0, clearance = 0.05;

  void validate() const {
    if (!(length > 0) || !(width > 0) || !(height > 0) || !(clearance >= 0))
      throw Error("synthetic body: length, width and height must be positive and clearance non-negative");
    if (!(slant_deg >= 0) || !(slant_deg < 90)) throw Error("synthetic body: slant angle must lie in [0, 90)");
    if (!(slant_run() * std::tan(slant_rad()) < height))
      throw Error("synthetic body: slant cuts through the full height");
  }
  double slant_rad() const { return slant_deg * std::numbers::pi / 180.0; }
  double slant_run() const { return 0.2 * length; }
  double slant_drop() const { return slant_run() * std::tan(slant_rad()); }
};

struct BodyRanges {
  std::array<double, 2> length{0.8, 1.2}, width{0.3, 0.45}, height{0.25, 0.35}, slant_deg{0.0, 35.0},
      clearance{0.03, 0.08};
};

struct SyntheticOptions {
  BodyRanges ranges;
  double edge = 0.08;  // target triangle leg length
  double velocity = 30.0;
  double density = 1.225;
  std::size_t raster = 256;
};

namespace detail {

/// Planar quad a-b-c-d split into an n x m bilinear lattice of cells, two
/// triangles each, wound so normals agree with `outward`.
inline void add_patch(Mesh& mesh, const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d, const Vec3& outward,
                      double edge) {
  const double lu = std::max(norm(b - a), norm(c - d)), lv = std::max(norm(d - a), norm(c - b));
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(lu / edge - 1e-9)));
  const std::size_t m = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(lv / edge - 1e-9)));
  const bool flip = dot(cross(b - a, d - a), outward) < 0;
  const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
  for (std::size_t j = 0; j <= m; ++j)
    for (std::size_t i = 0; i <= n; ++i) {
      const double s = static_cast<double>(i) / static_cast<double>(n), t = static_cast<double>(j) / static_cast<double>(m);
      Vec3 v = a * ((1 - s) * (1 - t)) + b * (s * (1 - t)) + c * (s * t) + d * ((1 - s) * t);
      // keep axis-aligned patches exactly planar
      for (int k = 0; k < 3; ++k)
        if (a[k] == b[k] && a[k] == c[k] && a[k] == d[k]) v[k] = a[k];
      mesh.vertices.push_back(v);
    }
  auto id = [&](std::size_t i, std::size_t j) { return base + static_cast<std::uint32_t>(j * (n + 1) + i); };
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < n; ++i) {
      const auto p00 = id(i, j), p10 = id(i + 1, j), p11 = id(i + 1, j + 1), p01 = id(i, j + 1);
      if (!flip) {
        mesh.faces.push_back({p00, p10, p11});
        mesh.faces.push_back({p00, p11, p01});
      } else {
        mesh.faces.push_back({p00, p11, p10});
        mesh.faces.push_back({p00, p01, p11});
      }
    }
}

}  // namespace detail

/// Closed triangulated body. The nose (x = 0) faces the oncoming flow.
inline Mesh build_body(const BodyParams& p, double edge) {
  p.validate();
  if (!(edge > 0)) throw Error("synthetic body: edge length must be positive");
  const double L = p.length, y0 = -0.5 * p.width, y1 = 0.5 * p.width, g = p.clearance, top = g + p.height;
  const double cx = p.slant_run(), cz = p.slant_drop();
  const bool slanted = cz > 0;
  auto P = [](double x, double y, double z) { return Vec3{x, y, z}; };
  Mesh m;
  // bottom, rear, top
  detail::add_patch(m, P(0, y0, g), P(L, y0, g), P(L, y1, g), P(0, y1, g), {0, 0, -1}, edge);
  detail::add_patch(m, P(L, y0, g), P(L, y0, top), P(L, y1, top), P(L, y1, g), {1, 0, 0}, edge);
  const double top_start = slanted ? cx : 0.0;
  detail::add_patch(m, P(top_start, y0, top), P(L, y0, top), P(L, y1, top), P(top_start, y1, top), {0, 0, 1}, edge);
  // front
  detail::add_patch(m, P(0, y0, g), P(0, y0, top - cz), P(0, y1, top - cz), P(0, y1, g), {-1, 0, 0}, edge);
  if (slanted) {
    const Vec3 n{-cz, 0, cx};
    detail::add_patch(m, P(0, y0, top - cz), P(cx, y0, top), P(cx, y1, top), P(0, y1, top - cz), n, edge);
  }
  // sides: rectangle behind the slant plus the trapezoid under it
  for (const auto [y, s] : {std::pair{y0, -1.0}, std::pair{y1, 1.0}}) {
    const Vec3 out{0, s, 0};
    if (slanted) {
      detail::add_patch(m, P(cx, y, g), P(L, y, g), P(L, y, top), P(cx, y, top), out, edge);
      detail::add_patch(m, P(0, y, g), P(cx, y, g), P(cx, y, top), P(0, y, top - cz), out, edge);
    } else {
      detail::add_patch(m, P(0, y, g), P(L, y, g), P(L, y, top), P(0, y, top), out, edge);
    }
  }
  return m;
}

/// Newtonian pressure q * max(0, -n.u)^2 per face.
inline std::vector<double> newtonian_pressure(std::span<const Vec3> normals, const Vec3& dir, double q) {
  std::vector<double> p(normals.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = std::max(0.0, -dot(normals[i], dir));
    p[i] = q * c * c;
  }
  return p;
}

struct SyntheticSample {
  BodyParams params;
  Mesh mesh;
  SurfaceSample sample;
};

/// Labels one mesh with Newtonian pressure and the matching drag integral.
/// Pressures are left unnormalized.
inline SurfaceSample label_mesh(const Mesh& mesh, const SyntheticOptions& opt) {
  const FaceData fd = faces_to_centroids(mesh);
  const Vec3 dir{1, 0, 0};
  const double q = 0.5 * opt.density * opt.velocity * opt.velocity;
  SurfaceSample s;
  s.points = fd.centroids;
  s.normals = fd.normals;
  s.areas = fd.areas;
  s.raw_pressure = newtonian_pressure(fd.normals, dir, q);
  s.drag = integrate_drag(s.raw_pressure, s.normals, s.areas, {dir, q, frontal_area(mesh, dir, opt.raster)});
  s.velocity = opt.velocity;
  return s;
}

/// Random bodies labelled analytically. Sample i draws its shape from
/// split_seed(seed, i); pressures are normalized with the statistics of the
/// whole generated set.
inline std::vector<SyntheticSample> gen_synthetic(std::size_t count, std::uint64_t seed,
                                                  const SyntheticOptions& opt = {}) {
  if (count == 0) throw Error("gen_synthetic: count must be at least 1");
  std::vector<SyntheticSample> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(split_seed(seed, i));
    const auto& r = opt.ranges;
    BodyParams p;
    p.length = rng.uniform(r.length[0], r.length[1]);
    p.width = rng.uniform(r.width[0], r.width[1]);
    p.height = rng.uniform(r.height[0], r.height[1]);
    p.slant_deg = rng.uniform(r.slant_deg[0], r.slant_deg[1]);
    p.clearance = rng.uniform(r.clearance[0], r.clearance[1]);
    out[i].params = p;
    out[i].mesh = build_body(p, opt.edge);
    out[i].sample = label_mesh(out[i].mesh, opt);
  }
  std::vector<double> all;
  for (const auto& s : out) all.insert(all.end(), s.sample.raw_pressure.begin(), s.sample.raw_pressure.end());
  const PressureStats st = pressure_stats(all);
  for (auto& s : out) {
    s.sample.pressure = normalize_pressure(s.sample.raw_pressure, st).first;
    s.sample.stats = st;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: sample_NNNNN/{mesh.obj,labels.txt} plus stats.txt

struct DatasetInfo {
  PressureStats stats;
  double velocity = 30.0;
  double density = 1.225;
  std::size_t count = 0;
};

inline std::string sample_dir_name(std::size_t i) {
  std::string s = std::to_string(i);
  return "sample_" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(cat("cannot write ", path.string()));
  out << text;
  if (!out) throw Error(cat("write failed for ", path.string()));
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(cat("cannot open ", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples,
                          const SyntheticOptions& opt) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error(detail::cat("cannot create dataset directory ", dir.string()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto sd = dir / sample_dir_name(i);
    std::filesystem::create_directories(sd, ec);
    if (ec) throw Error(detail::cat("cannot create ", sd.string()));
    detail::write_text(sd / "mesh.obj", write_obj(samples[i].mesh));
    std::string labels;
    for (double p : samples[i].sample.raw_pressure) labels += detail::fmt_double(p) + "\n";
    labels += "cd " + detail::fmt_double(samples[i].sample.drag) + "\n";
    detail::write_text(sd / "labels.txt", labels);
  }
  const PressureStats st = samples.empty() ? PressureStats{} : samples[0].sample.stats;
  std::string s;
  s += "count " + std::to_string(samples.size()) + "\n";
  s += "mean " + detail::fmt_double(st.mean) + "\n";
  s += "std " + detail::fmt_double(st.std) + "\n";
  s += "velocity " + detail::fmt_double(opt.velocity) + "\n";
  s += "density " + detail::fmt_double(opt.density) + "\n";
  s += "flow 1 0 0\n";
  s += "frontal_area raster " + std::to_string(opt.raster) + "\n";
  detail::write_text(dir / "stats.txt", s);
}

inline DatasetInfo read_dataset_info(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(detail::cat("dataset directory not found: ", dir.string()));
  const std::string text = detail::read_text(dir / "stats.txt");
  DatasetInfo info;
  bool have_mean = false, have_std = false, have_count = false;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto tok = detail::split_ws(line);
    if (tok.size() < 2) continue;
    double v = 0;
    const bool num = detail::parse_double(tok[1], v);
    if (tok[0] == "mean" && num) info.stats.mean = v, have_mean = true;
    else if (tok[0] == "std" && num) info.stats.std = v, have_std = true;
    else if (tok[0] == "velocity" && num) info.velocity = v;
    else if (tok[0] == "density" && num) info.density = v;
    else if (tok[0] == "count" && num) info.count = static_cast<std::size_t>(v), have_count = true;
  }
  if (!have_mean || !have_std || !have_count) throw Error(detail::cat("malformed stats file in ", dir.string()));
  return info;
}

/// Loads a dataset directory. Pressures are normalized with `stats` when
/// given, else with the dataset's own statistics.
inline std::vector<SurfaceSample> read_dataset(const std::filesystem::path& dir,
                                               std::optional<PressureStats> stats = {}) {
  const DatasetInfo info = read_dataset_info(dir);
  const PressureStats st = stats ? *stats : info.stats;
  std::vector<SurfaceSample> out;
  for (std::size_t i = 0; i < info.count; ++i) {
    const auto sd = dir / sample_dir_name(i);
    const Mesh mesh = read_obj(sd / "mesh.obj");
    const FaceData fd = faces_to_centroids(mesh);
    SurfaceSample s;
    s.points = fd.centroids;
    s.normals = fd.normals;
    s.areas = fd.areas;
    s.velocity = info.velocity;
    const std::string labels = detail::read_text(sd / "labels.txt");
    std::istringstream in(labels);
    std::string line;
    bool have_cd = false;
    std::size_t ln = 0;
    while (std::getline(in, line)) {
      ++ln;
      const auto tok = detail::split_ws(line);
      if (tok.empty()) continue;
      double v = 0;
      if (tok[0] == "cd") {
        if (tok.size() != 2 || !detail::parse_double(tok[1], v))
          throw Error(detail::cat((sd / "labels.txt").string(), " line ", ln, ": malformed drag line"));
        s.drag = v;
        have_cd = true;
      } else {
        if (have_cd || tok.size() != 1 || !detail::parse_double(tok[0], v))
          throw Error(detail::cat((sd / "labels.txt").string(), " line ", ln, ": malformed pressure"));
        s.raw_pressure.push_back(v);
      }
    }
    if (!have_cd) throw Error(detail::cat((sd / "labels.txt").string(), ": missing cd line"));
    if (s.raw_pressure.size() != s.points.size())
      throw Error(detail::cat((sd / "labels.txt").string(), ": ", s.raw_pressure.size(), " pressures for ",
                              s.points.size(), " faces"));
    s.pressure = normalize_pressure(s.raw_pressure, st).first;
    s.stats = st;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace figconv
