#include "usl/obj_io.hpp"

#include "usl/errors.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace usl::objio {

geom::Mesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::vector<Eigen::Vector3d> verts;
  std::vector<Eigen::Vector3i> faces;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Eigen::Vector3d v;
      if (!(ls >> v(0) >> v(1) >> v(2))) throw io_error("bad vertex line in " + path);
      verts.push_back(v);
    } else if (tag == "f") {
      Eigen::Vector3i f;
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        if (!(ls >> tok)) throw io_error("bad face line in " + path);
        // accept i, i/t, i/t/n, i//n
        f(k) = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      faces.push_back(f);
    }
    // other tags (vn, vt, comments, groups) are ignored
  }
  geom::Mesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (size_t i = 0; i < verts.size(); ++i)
    mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i];
  mesh.faces.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (size_t i = 0; i < faces.size(); ++i)
    mesh.faces.row(static_cast<Eigen::Index>(i)) = faces[i];
  mesh.space = geom::SpaceTag::view;
  mesh.validate();
  return mesh;
}

void write_obj(const std::string& path, const geom::Mesh& mesh) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path + " for writing");
  char buf[128];
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", mesh.vertices(i, 0),
                  mesh.vertices(i, 1), mesh.vertices(i, 2));
    out << buf;
  }
  for (Eigen::Index i = 0; i < mesh.faces.rows(); ++i)
    out << "f " << mesh.faces(i, 0) + 1 << ' ' << mesh.faces(i, 1) + 1 << ' '
        << mesh.faces(i, 2) + 1 << '\n';
  if (!out) throw io_error("failed writing " + path);
}

}  // namespace usl::objio
