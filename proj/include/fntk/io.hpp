#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "fntk/net.hpp"

namespace fntk {

std::string read_file(const std::string& path);
// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::string& path, std::string_view content);

// 17 significant digits; round-trips every finite double.
std::string format_double(double v);

// Dataset CSV: header `x_0..x_{d-1},y_0..y_{o-1}`, one datum per row.
// Lines starting with '#' are comments.
std::string dataset_to_csv(const TaskDataset& data);
TaskDataset dataset_from_csv(std::string_view text, double noise_variance = 1.0);
TaskDataset load_dataset(const std::string& path, double noise_variance = 1.0);

// Input-only CSV (x_* columns; any other columns are ignored). Header-only
// files give a 0 x d matrix when `expected_dim` is provided.
Matrix inputs_from_csv(std::string_view text, Index expected_dim = -1);

}  // namespace fntk
