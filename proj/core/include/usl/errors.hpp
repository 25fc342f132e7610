#pragma once

#include <stdexcept>
#include <string>

namespace usl {

// Thrown when a projection is requested for points at or behind the camera.
struct behind_camera_error : std::runtime_error {
  explicit behind_camera_error(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when an operation needs surface area and the mesh has none.
struct degenerate_mesh_error : std::runtime_error {
  explicit degenerate_mesh_error(const std::string& what) : std::runtime_error(what) {}
};

struct empty_mask_error : std::runtime_error {
  explicit empty_mask_error(const std::string& what) : std::runtime_error(what) {}
};

struct io_error : std::runtime_error {
  explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when an optimization step meets a non-finite value it cannot
// recover from (NaN gradients, diverged loss).
struct numerical_error : std::runtime_error {
  explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace usl
