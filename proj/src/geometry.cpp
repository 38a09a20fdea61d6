#include "ibn/geometry.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

namespace ibn {

void BoundaryPointCloud::validate() const {
  if (normals.rows() != points.rows() || normals.cols() != points.cols() ||
      areas.size() != points.rows()) {
    throw ConfigError("point cloud: points, normals and areas disagree in size");
  }
  if (!empty() && dim() != 2 && dim() != 3) {
    throw ConfigError("point cloud: dimension must be 2 or 3");
  }
  for (int i = 0; i < size(); ++i) {
    if (std::abs(normals.row(i).norm() - 1.0) > 1e-10) {
      throw ConfigError("point cloud: normal " + std::to_string(i) + " is not unit length");
    }
    if (!(areas(i) > 0.0)) {
      throw ConfigError("point cloud: area " + std::to_string(i) + " is not positive");
    }
  }
}

VecX BoundaryPointCloud::centroid() const {
  if (empty()) return VecX::Zero(dim());
  return points.colwise().mean().transpose();
}

BoundaryPointCloud circle_cloud(const Vec2& center, double radius, int n) {
  if (n < 8) throw ConfigError("circle_cloud: need at least 8 points, got " + std::to_string(n));
  if (!(radius > 0.0)) throw ConfigError("circle_cloud: radius must be positive");
  BoundaryPointCloud cloud;
  cloud.points.resize(n, 2);
  cloud.normals.resize(n, 2);
  cloud.areas = VecX::Constant(n, 2.0 * std::numbers::pi * radius / n);
  for (int k = 0; k < n; ++k) {
    const double t = 2.0 * std::numbers::pi * k / n;
    const Vec2 dir(std::cos(t), std::sin(t));
    cloud.points.row(k) = (center + radius * dir).transpose();
    cloud.normals.row(k) = dir.transpose();
  }
  return cloud;
}

namespace {

// Cardinal B-spline of the given degree, supported on [0, degree + 1).
double cardinal_bspline(int degree, double x) {
  if (degree == 0) return (x >= 0.0 && x < 1.0) ? 1.0 : 0.0;
  return (x * cardinal_bspline(degree - 1, x) +
          (degree + 1 - x) * cardinal_bspline(degree - 1, x - 1.0)) /
         degree;
}

}  // namespace

double polygon_signed_area(const BoundaryPointCloud& cloud) {
  const int n = cloud.size();
  double twice = 0.0;
  for (int i = 0; i < n; ++i) {
    const int j = (i + 1) % n;
    twice += cloud.points(i, 0) * cloud.points(j, 1) - cloud.points(j, 0) * cloud.points(i, 1);
  }
  return 0.5 * twice;
}

double polyline_perimeter(const BoundaryPointCloud& cloud) {
  const int n = cloud.size();
  double len = 0.0;
  for (int i = 0; i < n; ++i) len += (cloud.points.row((i + 1) % n) - cloud.points.row(i)).norm();
  return len;
}

BoundaryPointCloud sample_periodic_bspline(const Eigen::MatrixX2d& control, int degree,
                                           int samples) {
  const int m = static_cast<int>(control.rows());
  if (degree < 1) throw ConfigError("spline: degree must be at least 1");
  if (m < degree + 1) throw ConfigError("spline: need at least degree+1 control points");
  if (samples < 8) throw ConfigError("spline: need at least 8 samples");

  Eigen::MatrixX2d pts(samples, 2);
  for (int s = 0; s < samples; ++s) {
    // Parameter over [0, m); control j is centred at j + (degree + 1) / 2.
    const double u = static_cast<double>(m) * s / samples;
    Eigen::RowVector2d c = Eigen::RowVector2d::Zero();
    const int first = static_cast<int>(std::floor(u)) - degree;
    for (int j = first; j <= first + degree; ++j) {
      const double b = cardinal_bspline(degree, u - j);
      c += b * control.row(((j % m) + m) % m);
    }
    pts.row(s) = c;
  }

  BoundaryPointCloud cloud;
  cloud.points = pts;
  if (polygon_signed_area(cloud) < 0.0) cloud.points = pts.colwise().reverse().eval();

  const int n = samples;
  cloud.normals.resize(n, 2);
  cloud.areas.resize(n);
  for (int i = 0; i < n; ++i) {
    const Eigen::RowVector2d prev = cloud.points.row((i + n - 1) % n);
    const Eigen::RowVector2d next = cloud.points.row((i + 1) % n);
    const Eigen::RowVector2d here = cloud.points.row(i);
    const Eigen::RowVector2d t = next - prev;
    const double len = t.norm();
    if (!(len > 0.0)) throw ConfigError("spline: degenerate tangent at sample " + std::to_string(i));
    // Counterclockwise loop: outward normal is the tangent rotated clockwise.
    cloud.normals.row(i) = Eigen::RowVector2d(t.y(), -t.x()) / len;
    cloud.areas(i) = 0.5 * ((here - prev).norm() + (next - here).norm());
  }
  return cloud;
}

void SplineShapeSpec::validate() const {
  if (degree < 1) throw ConfigError("spline spec: degree must be at least 1");
  if (control_count < degree + 1) {
    throw ConfigError("spline spec: control count must be at least degree+1");
  }
  if (!(y_min > 0.0) || !(y_max >= y_min)) throw ConfigError("spline spec: bad ordinate range");
  if (samples < 8) throw ConfigError("spline spec: need at least 8 samples");
}

VecX spline_ordinates(const SplineShapeSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> dist(spec.y_min, spec.y_max);
  VecX y(spec.control_count);
  for (int k = 0; k < spec.control_count; ++k) y(k) = dist(rng);
  return y;
}

Eigen::MatrixX2d spline_control_polygon(const SplineShapeSpec& spec) {
  const VecX y = spline_ordinates(spec);
  Eigen::MatrixX2d control(spec.control_count, 2);
  for (int k = 0; k < spec.control_count; ++k) {
    const double x = static_cast<double>(k) / spec.control_count;
    const double angle = 2.0 * std::numbers::pi * x;
    const double r = spec.radius_scale * y(k);
    control(k, 0) = spec.center.x() + r * std::cos(angle);
    control(k, 1) = spec.center.y() + r * std::sin(angle);
  }
  return control;
}

BoundaryPointCloud sample_spline_shape(const SplineShapeSpec& spec) {
  return sample_periodic_bspline(spline_control_polygon(spec), spec.degree, spec.samples);
}

BoundaryPointCloud parse_cloud(std::istream& in, const WarningSink& warn) {
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  int width = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::vector<double> row;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("line " + std::to_string(line_no) + ": not a number: '" + tok + "'",
                         line_no);
      }
    }
    const int cols = static_cast<int>(row.size());
    if (cols != 5 && cols != 7) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 5 (2D) or 7 (3D) columns, got " +
                           std::to_string(cols),
                       line_no);
    }
    if (width == -1) width = cols;
    if (cols != width) {
      throw ParseError("line " + std::to_string(line_no) + ": column count changed from " +
                           std::to_string(width) + " to " + std::to_string(cols),
                       line_no);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("empty point cloud", line_no);

  const int d = (width - 1) / 2;
  const int n = static_cast<int>(rows.size());
  BoundaryPointCloud cloud;
  cloud.points.resize(n, d);
  cloud.normals.resize(n, d);
  cloud.areas.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) {
      cloud.points(i, k) = rows[i][k];
      cloud.normals(i, k) = rows[i][d + k];
    }
    cloud.areas(i) = rows[i][2 * d];
    const double len = cloud.normals.row(i).norm();
    if (!(len > 0.0)) throw ParseError("point " + std::to_string(i) + ": zero normal", i + 1);
    if (std::abs(len - 1.0) > 1e-10) {
      cloud.normals.row(i) /= len;
      if (warn) warn("point " + std::to_string(i) + ": normal of length " + std::to_string(len) +
                     " normalised");
    }
    if (!(cloud.areas(i) > 0.0)) {
      throw ParseError("point " + std::to_string(i) + ": area must be positive", i + 1);
    }
  }
  return cloud;
}

BoundaryPointCloud read_cloud(const std::filesystem::path& path, const WarningSink& warn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point cloud", path.string());
  try {
    return parse_cloud(in, warn);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line);
  }
}

void write_cloud(const BoundaryPointCloud& cloud, std::ostream& out) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << (cloud.dim() == 2 ? "# x y nx ny a\n" : "# x y z nx ny nz a\n");
  for (int i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < cloud.dim(); ++k) out << cloud.points(i, k) << ' ';
    for (int k = 0; k < cloud.dim(); ++k) out << cloud.normals(i, k) << ' ';
    out << cloud.areas(i) << '\n';
  }
}

void write_cloud(const BoundaryPointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write point cloud", path.string());
  write_cloud(cloud, out);
  if (!out) throw IoError("write failed", path.string());
}

}  // namespace ibn
