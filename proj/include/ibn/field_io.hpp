#ifndef IBN_FIELD_IO_HPP
#define IBN_FIELD_IO_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "ibn/grid_fem.hpp"

namespace ibn {

// Legacy ASCII VTK, STRUCTURED_POINTS, one SCALARS block per component.
// `names` may be empty (components become u0, u1, ...).
void write_field_vtk(const NodalField& field, const std::filesystem::path& path,
                     const std::vector<std::string>& names = {});

// Several scalar nodal arrays on one grid in a single VTK file.
void write_fields_vtk(const BackgroundGrid& grid, const std::vector<std::string>& names,
                      const std::vector<VecX>& values, const std::filesystem::path& path);

// Plain P2 greymap of one component, top row = largest y. Linear min-max map
// to 0..255; a constant field is all 128.
void write_field_pgm(const NodalField& field, const std::filesystem::path& path,
                     int component = 0);
std::vector<int> pgm_levels(const VecX& values);

struct CsvTable {
  std::vector<std::string> header;
  MatX rows;
};

// Header row then one line per row, 17 significant digits.
void write_csv(const CsvTable& table, const std::filesystem::path& path);
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace ibn

#endif  // IBN_FIELD_IO_HPP
