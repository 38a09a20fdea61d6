#ifndef IBN_GEOMETRY_HPP
#define IBN_GEOMETRY_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "ibn/types.hpp"

namespace ibn {

// Oriented, area-weighted samples of a closed boundary. Rows are points; the
// column count is the spatial dimension (2 or 3). Normals point out of the
// enclosed object.
struct BoundaryPointCloud {
  MatX points;
  MatX normals;
  VecX areas;

  int size() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
  bool empty() const { return points.rows() == 0; }

  // Throws ConfigError if shapes disagree, a normal is not unit length or an
  // area is not positive.
  void validate() const;

  double total_area() const { return areas.sum(); }
  VecX centroid() const;
};

BoundaryPointCloud circle_cloud(const Vec2& center, double radius, int n);

// Evenly parametrised samples of a closed uniform B-spline whose control
// polygon wraps periodically. Samples run counterclockwise (the loop is
// reversed if needed); normals come from the normalised rotated central
// difference tangent; each area is half the distance to both neighbours.
BoundaryPointCloud sample_periodic_bspline(const Eigen::MatrixX2d& control, int degree,
                                           int samples);

// Random blob recipe: control abscissae uniformly spaced in [0, 1), ordinates
// drawn from U(y_min, y_max). The abscissa is read as a turning fraction and
// the ordinate as a radius fraction about `center`, giving a star-shaped
// closed control polygon.
struct SplineShapeSpec {
  int control_count = 8;
  std::uint64_t seed = 0;
  int degree = 3;
  int samples = 1000;
  double y_min = 0.2;
  double y_max = 0.8;
  Vec2 center{0.5, 0.5};
  double radius_scale = 0.5;

  void validate() const;
};

// The ordinates drawn for a spec (the shape descriptor used by the
// parametric model).
VecX spline_ordinates(const SplineShapeSpec& spec);
Eigen::MatrixX2d spline_control_polygon(const SplineShapeSpec& spec);
BoundaryPointCloud sample_spline_shape(const SplineShapeSpec& spec);

// Signed area of the closed polyline through the points of a 2D cloud.
double polygon_signed_area(const BoundaryPointCloud& cloud);
double polyline_perimeter(const BoundaryPointCloud& cloud);

// Text format: one point per row, "x y nx ny a" in 2D or "x y z nx ny nz a"
// in 3D; '#' starts a comment line. Non-unit normals are normalised and
// reported through `warn`.
using WarningSink = std::function<void(const std::string&)>;
BoundaryPointCloud read_cloud(const std::filesystem::path& path, const WarningSink& warn = {});
BoundaryPointCloud parse_cloud(std::istream& in, const WarningSink& warn = {});
void write_cloud(const BoundaryPointCloud& cloud, const std::filesystem::path& path);
void write_cloud(const BoundaryPointCloud& cloud, std::ostream& out);

}  // namespace ibn

#endif  // IBN_GEOMETRY_HPP
