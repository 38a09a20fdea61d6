#include "ibn/field_io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ibn {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing", path.string());
  out.precision(17);
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed", path.string());
}

}  // namespace

void write_fields_vtk(const BackgroundGrid& grid, const std::vector<std::string>& names,
                      const std::vector<VecX>& values, const std::filesystem::path& path) {
  if (names.size() != values.size()) throw ConfigError("one name per field array");
  for (const VecX& v : values) {
    if (v.size() != grid.num_nodes()) throw ConfigError("field array length != node count");
  }
  std::ofstream out = open_out(path);
  out << "# vtk DataFile Version 3.0\n"
      << "ibn field\n"
      << "ASCII\n"
      << "DATASET STRUCTURED_POINTS\n"
      << "DIMENSIONS " << grid.nx() + 1 << ' ' << grid.ny() + 1 << " 1\n"
      << "ORIGIN " << grid.lo().x() << ' ' << grid.lo().y() << " 0\n"
      << "SPACING " << grid.hx() << ' ' << grid.hy() << " 1\n"
      << "POINT_DATA " << grid.num_nodes() << '\n';
  for (std::size_t k = 0; k < names.size(); ++k) {
    out << "SCALARS " << names[k] << " double 1\nLOOKUP_TABLE default\n";
    // Node numbering is x fastest, which is also VTK's point order.
    for (Eigen::Index n = 0; n < values[k].size(); ++n) out << values[k](n) << '\n';
  }
  finish(out, path);
}

void write_field_vtk(const NodalField& field, const std::filesystem::path& path,
                     const std::vector<std::string>& names) {
  std::vector<std::string> labels = names;
  if (labels.empty()) {
    for (int c = 0; c < field.n_dof; ++c) labels.push_back("u" + std::to_string(c));
  }
  if (static_cast<int>(labels.size()) != field.n_dof) {
    throw ConfigError("need one name per component");
  }
  std::vector<VecX> comps;
  for (int c = 0; c < field.n_dof; ++c) comps.push_back(field.component(c));
  write_fields_vtk(field.grid, labels, comps, path);
}

std::vector<int> pgm_levels(const VecX& values) {
  std::vector<int> out(values.size(), 128);
  if (values.size() == 0) return out;
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  if (!(hi > lo)) return out;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    out[i] = static_cast<int>(std::lround(255.0 * (values(i) - lo) / (hi - lo)));
  }
  return out;
}

void write_field_pgm(const NodalField& field, const std::filesystem::path& path,
                     int component) {
  if (component < 0 || component >= field.n_dof) throw ConfigError("no such component");
  const BackgroundGrid& g = field.grid;
  const std::vector<int> levels = pgm_levels(field.component(component));
  std::ofstream out = open_out(path);
  const int w = g.nx() + 1;
  const int h = g.ny() + 1;
  out << "P2\n" << w << ' ' << h << "\n255\n";
  for (int j = h - 1; j >= 0; --j) {
    for (int i = 0; i < w; ++i) {
      out << levels[g.node_index(i, j)] << (i + 1 < w ? ' ' : '\n');
    }
  }
  finish(out, path);
}

void write_csv(const CsvTable& table, const std::filesystem::path& path) {
  if (static_cast<Eigen::Index>(table.header.size()) != table.rows.cols()) {
    throw ConfigError("csv header and column count differ");
  }
  std::ofstream out = open_out(path);
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    out << (c ? "," : "") << table.header[c];
  }
  out << '\n';
  for (Eigen::Index r = 0; r < table.rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.rows.cols(); ++c) {
      out << (c ? "," : "") << table.rows(r, c);
    }
    out << '\n';
  }
  finish(out, path);
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open", path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty csv", 1);
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.header.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ParseError("bad number '" + cell + "' on line " + std::to_string(lineno), lineno);
      }
    }
    if (row.size() != t.header.size()) {
      throw ParseError("wrong column count on line " + std::to_string(lineno), lineno);
    }
    rows.push_back(std::move(row));
  }
  t.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) t.rows(r, c) = rows[r][c];
  }
  return t;
}

}  // namespace ibn
