#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ibn/field_io.hpp"

using namespace ibn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("ibn_io_" + name); }

}  // namespace

TEST_CASE("constant field writes mid grey") {
  const auto grid = BackgroundGrid::unit_square(2);
  NodalField f(grid, 1, VecX::Constant(9, 3.5));
  const auto p = tmp("const.pgm");
  write_field_pgm(f, p);
  CHECK(slurp(p) == "P2\n3 3\n255\n128 128 128\n128 128 128\n128 128 128\n");
  fs::remove(p);
}

TEST_CASE("pgm maps min to 0 and max to 255, top row first") {
  const auto grid = BackgroundGrid::unit_square(1);
  VecX v(4);
  v << 0.0, 1.0, 2.0, 4.0;  // nodes (0,0) (1,0) (0,1) (1,1)
  const auto p = tmp("ramp.pgm");
  write_field_pgm(NodalField(grid, 1, v), p);
  CHECK(slurp(p) == "P2\n2 2\n255\n128 255\n0 64\n");
  fs::remove(p);
  CHECK(pgm_levels(VecX()).empty());
  CHECK_THROWS_AS(write_field_pgm(NodalField(grid, 1, v), p, 1), ConfigError);
}

TEST_CASE("vtk header and point data") {
  const int n = 4;
  const auto grid = BackgroundGrid::unit_square(n);
  NodalField f(grid, 2);
  for (int i = 0; i < grid.num_nodes(); ++i) {
    f.at(i, 0) = i;
    f.at(i, 1) = -i;
  }
  const auto p = tmp("f.vtk");
  write_field_vtk(f, p, {"a", "b"});
  std::ifstream in(p);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 8 + 2 * (2 + 25));
  CHECK(lines[0].rfind("# vtk DataFile", 0) == 0);
  CHECK(lines[2] == "ASCII");
  CHECK(lines[3] == "DATASET STRUCTURED_POINTS");
  CHECK(lines[4] == "DIMENSIONS 5 5 1");
  CHECK(lines[5] == "ORIGIN 0 0 0");
  CHECK(lines[6] == "SPACING 0.25 0.25 1");
  CHECK(lines[7] == "POINT_DATA 25");
  CHECK(lines[8] == "SCALARS a double 1");
  CHECK(lines[10] == "0");
  CHECK(lines[11] == "1");
  CHECK(lines[35] == "SCALARS b double 1");
  CHECK(lines[38] == "-1");
  fs::remove(p);

  CHECK_THROWS_AS(write_field_vtk(f, p, {"only"}), ConfigError);
  write_field_vtk(f, p);
  CHECK(slurp(p).find("SCALARS u1 double 1") != std::string::npos);
  fs::remove(p);
}

TEST_CASE("csv round trip keeps every bit") {
  CsvTable t;
  t.header = {"x", "y", "z"};
  t.rows.resize(3, 3);
  t.rows << 0.1, 1.0 / 3.0, -2e-300, 1e15 + 0.5, 6.02214076e23, 0.0, -7, 2.0 / 7.0, 1e-17;
  const auto p = tmp("t.csv");
  write_csv(t, p);
  const std::string text = slurp(p);
  CHECK(text.rfind("x,y,z\n", 0) == 0);
  CHECK(text.find("0.33333333333333331") != std::string::npos);
  const CsvTable back = read_csv(p);
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  fs::remove(p);
}

TEST_CASE("csv errors") {
  CsvTable t;
  t.header = {"a"};
  t.rows = MatX::Zero(1, 2);
  CHECK_THROWS_AS(write_csv(t, tmp("bad.csv")), ConfigError);

  const auto p = tmp("broken.csv");
  {
    std::ofstream out(p);
    out << "a,b\n1,2\n3\n";
  }
  CHECK_THROWS_AS(read_csv(p), ParseError);
  {
    std::ofstream out(p);
    out << "a,b\n1,x\n";
  }
  CHECK_THROWS_AS(read_csv(p), ParseError);
  fs::remove(p);
  CHECK_THROWS_AS(read_csv(p), IoError);
}

TEST_CASE("unwritable paths raise IoError") {
  const auto grid = BackgroundGrid::unit_square(2);
  NodalField f(grid, 1, VecX::Zero(9));
  const fs::path bad = "/nonexistent_dir_ibn/x.vtk";
  CHECK_THROWS_AS(write_field_vtk(f, bad), IoError);
  CHECK_THROWS_AS(write_field_pgm(f, bad), IoError);
  CsvTable t;
  t.header = {"a"};
  t.rows = MatX::Zero(1, 1);
  CHECK_THROWS_AS(write_csv(t, bad), IoError);
}
