#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace cotd {

/// Named dense tensors, stored little-endian as raw IEEE doubles so a reload
/// is bit-identical.
using NamedTensors = std::vector<std::pair<std::string, Eigen::MatrixXd>>;

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_tensors(const std::filesystem::path& path);

/// Looks up `name`; throws CheckpointError if absent or mis-shaped.
const Eigen::MatrixXd& tensor_at(const NamedTensors& tensors, const std::string& name,
                                 Eigen::Index rows, Eigen::Index cols);

}  // namespace cotd
