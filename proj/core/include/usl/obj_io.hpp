#pragma once

// Wavefront OBJ read/write: `v x y z` lines and 1-indexed `f i j k` faces.
// Coordinates are written with 17 significant digits so doubles round-trip.

#include "usl/geom.hpp"

#include <string>

namespace usl::objio {

geom::Mesh read_obj(const std::string& path);
void write_obj(const std::string& path, const geom::Mesh& mesh);

}  // namespace usl::objio
