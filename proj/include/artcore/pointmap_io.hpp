#pragma once

#include "artcore/pointmap.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace artcore {

// Little-endian binary pointmap: magic "ADPM", u32 version=1, u32 H, u32 W,
// then H*W row-major records of (f32 x, f32 y, f32 z, f32 conf, u8 valid).

inline std::string pointmap_filename(int frame_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pointmap_%06d.adpm", frame_id);
  return buf;
}

inline std::string correspondence_filename(int frame_c, int frame_k) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "corr_%06d_%06d.txt", frame_c, frame_k);
  return buf;
}

namespace detail {
template <typename T>
void write_raw(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
bool read_raw(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<bool>(in);
}
}  // namespace detail

inline void write_pointmap(const std::string& path, const Pointmap& pm) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ProviderError("cannot open for write: " + path);
  out.write("ADPM", 4);
  detail::write_raw<std::uint32_t>(out, 1);
  detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(pm.height));
  detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(pm.width));
  for (size_t i = 0; i < pm.points.size(); ++i) {
    detail::write_raw<float>(out, static_cast<float>(pm.points[i].x()));
    detail::write_raw<float>(out, static_cast<float>(pm.points[i].y()));
    detail::write_raw<float>(out, static_cast<float>(pm.points[i].z()));
    detail::write_raw<float>(out, pm.raw_conf[i]);
    detail::write_raw<std::uint8_t>(out, pm.valid[i]);
  }
  if (!out) throw ProviderError("short write: " + path);
}

inline Pointmap read_pointmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProviderError("cannot open pointmap: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "ADPM")
    throw ProviderError("bad pointmap magic: " + path);
  std::uint32_t version = 0, h = 0, w = 0;
  if (!detail::read_raw(in, version) || version != 1)
    throw ProviderError("unsupported pointmap version: " + path);
  if (!detail::read_raw(in, h) || !detail::read_raw(in, w))
    throw ProviderError("truncated pointmap header: " + path);
  Pointmap pm(static_cast<int>(h), static_cast<int>(w));
  for (size_t i = 0; i < pm.points.size(); ++i) {
    float x, y, z, conf;
    std::uint8_t valid;
    if (!detail::read_raw(in, x) || !detail::read_raw(in, y) || !detail::read_raw(in, z) ||
        !detail::read_raw(in, conf) || !detail::read_raw(in, valid))
      throw ProviderError("truncated pointmap body: " + path);
    pm.points[i] = Vec3(x, y, z);
    pm.raw_conf[i] = conf;
    pm.valid[i] = valid;
  }
  return pm;
}

// Line-oriented correspondences: u_c v_c u_k v_k Xc Yc Zc Xk Yk Zk.

inline void write_correspondences(const std::string& path, const CorrespondenceSet& cs) {
  std::ofstream out(path);
  if (!out) throw ProviderError("cannot open for write: " + path);
  out.precision(17);
  for (const auto& c : cs.items) {
    out << c.pixel_c.x() << ' ' << c.pixel_c.y() << ' ' << c.pixel_k.x() << ' '
        << c.pixel_k.y() << ' ' << c.p_c.x() << ' ' << c.p_c.y() << ' ' << c.p_c.z() << ' '
        << c.p_k.x() << ' ' << c.p_k.y() << ' ' << c.p_k.z() << '\n';
  }
  if (!out) throw ProviderError("short write: " + path);
}

inline CorrespondenceSet read_correspondences(const std::string& path, int frame_c,
                                              int frame_k) {
  std::ifstream in(path);
  if (!in) throw ProviderError("cannot open correspondences: " + path);
  CorrespondenceSet cs;
  cs.frame_c = frame_c;
  cs.frame_k = frame_k;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Correspondence c;
    if (!(ls >> c.pixel_c.x() >> c.pixel_c.y() >> c.pixel_k.x() >> c.pixel_k.y() >>
          c.p_c.x() >> c.p_c.y() >> c.p_c.z() >> c.p_k.x() >> c.p_k.y() >> c.p_k.z()))
      throw ProviderError("malformed correspondence line in " + path);
    cs.items.push_back(c);
  }
  return cs;
}

}  // namespace artcore
