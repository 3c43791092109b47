#include "gleve/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

void check_dims(int nx, int ny, int nz, int c) {
  if (nx <= 0 || ny <= 0 || nz <= 0 || c <= 0) {
    throw DataError("volume dims/channels must be positive");
  }
}

void check_spacing(float sx, float sy, float sz) {
  if (!(sx > 0.0f) || !(sy > 0.0f) || !(sz > 0.0f)) {
    throw DataError("voxel spacing must be strictly positive");
  }
}

// 1D Gaussian truncated at 3 sigma, normalized to sum 1.
std::vector<double> gaussian_kernel(double sigma) {
  int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double w = std::exp(-0.5 * (i / sigma) * (i / sigma));
    k[i + radius] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

// Convolve along one axis. stride/extent describe that axis in the linear
// layout; `lines` enumerates the start index of each 1D line.
void convolve_axis(std::vector<double>& buf, const std::vector<double>& kernel,
                   const std::vector<std::int64_t>& lines, std::int64_t stride,
                   int extent, BoundaryMode mode) {
  const int radius = int(kernel.size() / 2);
  std::vector<double> line(extent);
  for (std::int64_t base : lines) {
    for (int i = 0; i < extent; ++i) line[i] = buf[base + i * stride];
    for (int i = 0; i < extent; ++i) {
      double acc = 0.0;
      double wsum = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        int j = i + t;
        if (j < 0 || j >= extent) continue;
        acc += kernel[t + radius] * line[j];
        wsum += kernel[t + radius];
      }
      if (mode == BoundaryMode::kRenormalize && wsum > 0.0) acc /= wsum;
      buf[base + i * stride] = acc;
    }
  }
}

Volume3 smooth_impl(const Volume3& v, double sigma, BoundaryMode mode) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian sigma must be positive");
  if (v.channels != 1) throw DataError("smoothing expects single channel");
  const auto kernel = gaussian_kernel(sigma);

  std::vector<double> buf(v.data.begin(), v.data.end());
  const std::int64_t sx_stride = std::int64_t(v.ny) * v.nz;
  const std::int64_t sy_stride = v.nz;

  std::vector<std::int64_t> lines;
  // x axis: one line per (y, z)
  lines.clear();
  for (int y = 0; y < v.ny; ++y)
    for (int z = 0; z < v.nz; ++z) lines.push_back(std::int64_t(y) * v.nz + z);
  convolve_axis(buf, kernel, lines, sx_stride, v.nx, mode);
  // y axis
  lines.clear();
  for (int x = 0; x < v.nx; ++x)
    for (int z = 0; z < v.nz; ++z)
      lines.push_back(std::int64_t(x) * v.ny * v.nz + z);
  convolve_axis(buf, kernel, lines, sy_stride, v.ny, mode);
  // z axis
  lines.clear();
  for (int x = 0; x < v.nx; ++x)
    for (int y = 0; y < v.ny; ++y)
      lines.push_back((std::int64_t(x) * v.ny + y) * v.nz);
  convolve_axis(buf, kernel, lines, 1, v.nz, mode);

  Volume3 out(v.nx, v.ny, v.nz, 1, v.sx, v.sy, v.sz);
  for (std::int64_t i = 0; i < std::int64_t(buf.size()); ++i)
    out.data[i] = float(buf[i]);
  return out;
}

// union-find with path halving
struct DisjointSet {
  std::vector<std::int64_t> parent;
  explicit DisjointSet(std::int64_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), std::int64_t(0));
  }
  std::int64_t find(std::int64_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(std::int64_t a, std::int64_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26) {
    throw ConfigError("connectivity must be 6, 18 or 26");
  }
  std::vector<std::array<int, 3>> offs;
  for (int dx = -1; dx <= 1; ++dx)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dz = -1; dz <= 1; ++dz) {
        int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan > 1) continue;
        if (connectivity == 18 && manhattan > 2) continue;
        offs.push_back({dx, dy, dz});
      }
  return offs;
}

}  // namespace

Volume3::Volume3(int nx_, int ny_, int nz_, int c, float sx_, float sy_,
                 float sz_)
    : nx(nx_), ny(ny_), nz(nz_), channels(c), sx(sx_), sy(sy_), sz(sz_) {
  check_dims(nx, ny, nz, channels);
  check_spacing(sx, sy, sz);
  data.assign(std::size_t(size()), 0.0f);
}

void Volume3::validate() const {
  check_dims(nx, ny, nz, channels);
  check_spacing(sx, sy, sz);
  if (std::int64_t(data.size()) != size()) {
    throw DataError("volume data length does not match dims*channels");
  }
  for (float f : data) {
    if (!std::isfinite(f)) throw DataError("volume contains non-finite value");
  }
}

Mask3::Mask3(int nx_, int ny_, int nz_, float sx_, float sy_, float sz_)
    : nx(nx_), ny(ny_), nz(nz_), sx(sx_), sy(sy_), sz(sz_) {
  check_dims(nx, ny, nz, 1);
  check_spacing(sx, sy, sz);
  data.assign(std::size_t(voxels()), 0);
}

std::int64_t Mask3::count() const {
  std::int64_t n = 0;
  for (std::uint8_t v : data) n += v;
  return n;
}

void Mask3::validate() const {
  check_dims(nx, ny, nz, 1);
  check_spacing(sx, sy, sz);
  if (std::int64_t(data.size()) != voxels()) {
    throw DataError("mask data length does not match dims");
  }
  for (std::uint8_t v : data) {
    if (v > 1) throw DataError("mask values must be 0 or 1");
  }
}

bool BBox3::valid_within(int nx, int ny, int nz) const {
  const int dims[3] = {nx, ny, nz};
  for (int a = 0; a < 3; ++a) {
    if (lo[a] < 0 || hi[a] > dims[a] || lo[a] >= hi[a]) return false;
  }
  return true;
}

Volume3 gaussian_smooth(const Mask3& m, double sigma_vox, BoundaryMode mode) {
  Volume3 v(m.nx, m.ny, m.nz, 1, m.sx, m.sy, m.sz);
  for (std::int64_t i = 0; i < m.voxels(); ++i) v.data[i] = float(m.data[i]);
  Volume3 out = smooth_impl(v, sigma_vox, mode);
  for (float& f : out.data) f = std::clamp(f, 0.0f, 1.0f);
  return out;
}

Volume3 gaussian_smooth_volume(const Volume3& v, double sigma_vox,
                               BoundaryMode mode) {
  return smooth_impl(v, sigma_vox, mode);
}

std::vector<std::vector<std::int64_t>> connected_components(const Mask3& m,
                                                            int connectivity) {
  const auto offs = neighbor_offsets(connectivity);
  DisjointSet ds(m.voxels());
  for (int x = 0; x < m.nx; ++x)
    for (int y = 0; y < m.ny; ++y)
      for (int z = 0; z < m.nz; ++z) {
        if (!m.at(x, y, z)) continue;
        const std::int64_t i = m.vox_index(x, y, z);
        for (const auto& o : offs) {
          int px = x + o[0], py = y + o[1], pz = z + o[2];
          if (px < 0 || px >= m.nx || py < 0 || py >= m.ny || pz < 0 ||
              pz >= m.nz)
            continue;
          if (m.at(px, py, pz)) ds.unite(i, m.vox_index(px, py, pz));
        }
      }

  std::vector<std::vector<std::int64_t>> comps;
  std::vector<std::int64_t> root_to_comp(m.voxels(), -1);
  for (std::int64_t i = 0; i < m.voxels(); ++i) {
    if (!m.data[i]) continue;
    std::int64_t r = ds.find(i);
    if (root_to_comp[r] < 0) {
      root_to_comp[r] = std::int64_t(comps.size());
      comps.emplace_back();
    }
    comps[root_to_comp[r]].push_back(i);
  }
  // members are already ascending; order components by (size desc, min asc)
  std::sort(comps.begin(), comps.end(),
            [](const std::vector<std::int64_t>& a,
               const std::vector<std::int64_t>& b) {
              if (a.size() != b.size()) return a.size() > b.size();
              return a.front() < b.front();
            });
  return comps;
}

Volume3 crop(const Volume3& v, const BBox3& b) {
  if (!b.valid_within(v.nx, v.ny, v.nz)) {
    throw DataError("crop box out of volume bounds");
  }
  Volume3 out(b.extent(0), b.extent(1), b.extent(2), v.channels, v.sx, v.sy,
              v.sz);
  for (int x = 0; x < out.nx; ++x)
    for (int y = 0; y < out.ny; ++y)
      for (int z = 0; z < out.nz; ++z)
        for (int c = 0; c < v.channels; ++c)
          out.at(x, y, z, c) = v.at(x + b.lo[0], y + b.lo[1], z + b.lo[2], c);
  return out;
}

Mask3 crop(const Mask3& m, const BBox3& b) {
  if (!b.valid_within(m.nx, m.ny, m.nz)) {
    throw DataError("crop box out of mask bounds");
  }
  Mask3 out(b.extent(0), b.extent(1), b.extent(2), m.sx, m.sy, m.sz);
  for (int x = 0; x < out.nx; ++x)
    for (int y = 0; y < out.ny; ++y)
      for (int z = 0; z < out.nz; ++z)
        out.at(x, y, z) = m.at(x + b.lo[0], y + b.lo[1], z + b.lo[2]);
  return out;
}

Volume3 embed(const Volume3& dst, const Volume3& sub,
              const std::array<int, 3>& lo) {
  BBox3 b{lo, {lo[0] + sub.nx, lo[1] + sub.ny, lo[2] + sub.nz}};
  if (!b.valid_within(dst.nx, dst.ny, dst.nz) || sub.channels != dst.channels) {
    throw DataError("embed region out of bounds or channel mismatch");
  }
  Volume3 out = dst;
  for (int x = 0; x < sub.nx; ++x)
    for (int y = 0; y < sub.ny; ++y)
      for (int z = 0; z < sub.nz; ++z)
        for (int c = 0; c < sub.channels; ++c)
          out.at(x + lo[0], y + lo[1], z + lo[2], c) = sub.at(x, y, z, c);
  return out;
}

Volume3 upsample2(const Volume3& v) {
  Volume3 out(2 * v.nx, 2 * v.ny, 2 * v.nz, v.channels, v.sx / 2, v.sy / 2,
              v.sz / 2);
  auto src = [&](int o, int n, int& f0, int& f1, double& t) {
    double s = 0.5 * o - 0.25;
    double fl = std::floor(s);
    t = s - fl;
    f0 = std::clamp(int(fl), 0, n - 1);
    f1 = std::clamp(int(fl) + 1, 0, n - 1);
  };
  for (int x = 0; x < out.nx; ++x) {
    int x0, x1;
    double tx;
    src(x, v.nx, x0, x1, tx);
    for (int y = 0; y < out.ny; ++y) {
      int y0, y1;
      double ty;
      src(y, v.ny, y0, y1, ty);
      for (int z = 0; z < out.nz; ++z) {
        int z0, z1;
        double tz;
        src(z, v.nz, z0, z1, tz);
        for (int c = 0; c < v.channels; ++c) {
          double v000 = v.at(x0, y0, z0, c), v001 = v.at(x0, y0, z1, c);
          double v010 = v.at(x0, y1, z0, c), v011 = v.at(x0, y1, z1, c);
          double v100 = v.at(x1, y0, z0, c), v101 = v.at(x1, y0, z1, c);
          double v110 = v.at(x1, y1, z0, c), v111 = v.at(x1, y1, z1, c);
          double a = (1 - tx) * ((1 - ty) * ((1 - tz) * v000 + tz * v001) +
                                 ty * ((1 - tz) * v010 + tz * v011)) +
                     tx * ((1 - ty) * ((1 - tz) * v100 + tz * v101) +
                           ty * ((1 - tz) * v110 + tz * v111));
          out.at(x, y, z, c) = float(a);
        }
      }
    }
  }
  return out;
}

MaskStats mask_stats(const Mask3& m, const Volume3& ct) {
  if (!m.same_grid(Mask3{ct.nx, ct.ny, ct.nz})) {
    throw DataError("mask_stats shape mismatch");
  }
  MaskStats s;
  std::int64_t n = 0;
  double hu_sum = 0.0;
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (int x = 0; x < m.nx; ++x)
    for (int y = 0; y < m.ny; ++y)
      for (int z = 0; z < m.nz; ++z) {
        if (!m.at(x, y, z)) continue;
        ++n;
        hu_sum += ct.at(x, y, z, 0);
        cx += (x + 0.5) * m.sx;
        cy += (y + 0.5) * m.sy;
        cz += (z + 0.5) * m.sz;
      }
  s.volume_mm3 = double(n) * m.voxel_volume_mm3();
  if (n == 0) {
    throw DataError("mask_stats: empty mask has no mean/centroid");
  }
  s.mean_hu = hu_sum / double(n);
  s.centroid_mm = {cx / double(n), cy / double(n), cz / double(n)};
  return s;
}

namespace {

constexpr char kMagic[16] = {'G', 'L', 'E', 'V', 'E', 'V', 'O', 'L',
                             '0', '1', 0,   0,   0,   0,   0,   0};

template <typename T>
void write_le(std::ostream& os, T v) {
  // assumes little-endian host (x86/arm builds)
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void write_volume(const std::string& path, const Volume3& v) {
  v.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for write: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(os, std::uint32_t(v.nx));
  write_le<std::uint32_t>(os, std::uint32_t(v.ny));
  write_le<std::uint32_t>(os, std::uint32_t(v.nz));
  write_le<std::uint32_t>(os, std::uint32_t(v.channels));
  write_le<float>(os, v.sx);
  write_le<float>(os, v.sy);
  write_le<float>(os, v.sz);
  os.write(reinterpret_cast<const char*>(v.data.data()),
           std::streamsize(v.data.size() * sizeof(float)));
  if (!os) throw DataError("short write: " + path);
}

Volume3 read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for read: " + path);
  char magic[16];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("bad volume magic: " + path);
  }
  const auto nx = read_le<std::uint32_t>(is);
  const auto ny = read_le<std::uint32_t>(is);
  const auto nz = read_le<std::uint32_t>(is);
  const auto c = read_le<std::uint32_t>(is);
  const float sx = read_le<float>(is);
  const float sy = read_le<float>(is);
  const float sz = read_le<float>(is);
  if (!is || nx == 0 || ny == 0 || nz == 0 || c == 0 ||
      std::uint64_t(nx) * ny * nz * c > (std::uint64_t(1) << 31)) {
    throw DataError("bad volume header: " + path);
  }
  Volume3 v(int(nx), int(ny), int(nz), int(c), sx, sy, sz);
  is.read(reinterpret_cast<char*>(v.data.data()),
          std::streamsize(v.data.size() * sizeof(float)));
  if (!is) throw DataError("truncated volume data: " + path);
  v.validate();
  return v;
}

void write_mask(const std::string& path, const Mask3& m) {
  m.validate();
  Volume3 v(m.nx, m.ny, m.nz, 1, m.sx, m.sy, m.sz);
  for (std::int64_t i = 0; i < m.voxels(); ++i) v.data[i] = float(m.data[i]);
  write_volume(path, v);
}

Mask3 read_mask(const std::string& path) {
  Volume3 v = read_volume(path);
  if (v.channels != 1) throw DataError("mask file must have c=1: " + path);
  Mask3 m(v.nx, v.ny, v.nz, v.sx, v.sy, v.sz);
  for (std::int64_t i = 0; i < m.voxels(); ++i) {
    float f = v.data[i];
    if (f != 0.0f && f != 1.0f) {
      throw DataError("mask file contains non-binary value: " + path);
    }
    m.data[i] = std::uint8_t(f);
  }
  return m;
}

}  // namespace gleve
