#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace gleve {

// Dense 3D scalar field. Data is row-major over (x, y, z) with the channel
// innermost: index = ((x*ny + y)*nz + z)*channels + ch. Spacing is mm/voxel.
struct Volume3 {
  int nx = 0, ny = 0, nz = 0;
  int channels = 1;
  float sx = 1.0f, sy = 1.0f, sz = 1.0f;
  std::vector<float> data;

  Volume3() = default;
  Volume3(int nx_, int ny_, int nz_, int c = 1, float sx_ = 1.0f,
          float sy_ = 1.0f, float sz_ = 1.0f);

  std::int64_t voxels() const {
    return std::int64_t(nx) * ny * nz;
  }
  std::int64_t size() const { return voxels() * channels; }

  std::int64_t vox_index(int x, int y, int z) const {
    return (std::int64_t(x) * ny + y) * nz + z;
  }
  float& at(int x, int y, int z, int ch = 0) {
    return data[vox_index(x, y, z) * channels + ch];
  }
  float at(int x, int y, int z, int ch = 0) const {
    return data[vox_index(x, y, z) * channels + ch];
  }

  double voxel_volume_mm3() const {
    return double(sx) * sy * sz;
  }
  bool same_grid(const Volume3& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz;
  }

  // Throws DataError on shape/length mismatch or non-finite values.
  void validate() const;
};

// Binary mask on the same grid convention; values restricted to {0,1}.
struct Mask3 {
  int nx = 0, ny = 0, nz = 0;
  float sx = 1.0f, sy = 1.0f, sz = 1.0f;
  std::vector<std::uint8_t> data;

  Mask3() = default;
  Mask3(int nx_, int ny_, int nz_, float sx_ = 1.0f, float sy_ = 1.0f,
        float sz_ = 1.0f);

  std::int64_t voxels() const {
    return std::int64_t(nx) * ny * nz;
  }
  std::int64_t vox_index(int x, int y, int z) const {
    return (std::int64_t(x) * ny + y) * nz + z;
  }
  std::uint8_t& at(int x, int y, int z) { return data[vox_index(x, y, z)]; }
  std::uint8_t at(int x, int y, int z) const {
    return data[vox_index(x, y, z)];
  }
  double voxel_volume_mm3() const {
    return double(sx) * sy * sz;
  }
  std::int64_t count() const;
  bool same_grid(const Mask3& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz;
  }
  void validate() const;
};

// Half-open voxel box: lo inclusive, hi exclusive.
struct BBox3 {
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> hi{0, 0, 0};

  int extent(int axis) const { return hi[axis] - lo[axis]; }
  std::int64_t volume() const {
    return std::int64_t(extent(0)) * extent(1) * extent(2);
  }
  bool contains(int x, int y, int z) const {
    return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] &&
           z < hi[2];
  }
  bool valid_within(int nx, int ny, int nz) const;
};

enum class BoundaryMode {
  kRenormalize,  // truncated kernel reweighted to sum 1 inside the volume
  kZeroPad,      // plain convolution, mass can leak across the border
};

// Separable Gaussian, kernel truncated at 3 sigma, weights normalized to 1.
Volume3 gaussian_smooth(const Mask3& m, double sigma_vox,
                        BoundaryMode mode = BoundaryMode::kRenormalize);
Volume3 gaussian_smooth_volume(const Volume3& v, double sigma_vox,
                               BoundaryMode mode = BoundaryMode::kRenormalize);

// Foreground partition into maximal connected sets, ordered by component
// size descending, then minimum linear voxel index ascending.
std::vector<std::vector<std::int64_t>> connected_components(const Mask3& m,
                                                            int connectivity);

Volume3 crop(const Volume3& v, const BBox3& b);
Mask3 crop(const Mask3& m, const BBox3& b);

// Writes `sub` into a copy of `dst` with its origin at `lo`.
Volume3 embed(const Volume3& dst, const Volume3& sub,
              const std::array<int, 3>& lo);

// Dyadic trilinear upsampling (factor fixed at 2).
Volume3 upsample2(const Volume3& v);

struct MaskStats {
  double volume_mm3 = 0.0;
  double mean_hu = 0.0;
  std::array<double, 3> centroid_mm{0.0, 0.0, 0.0};
};

// volume = count * voxel volume; mean/centroid require a nonempty mask.
MaskStats mask_stats(const Mask3& m, const Volume3& ct);

// GLEVEVOL01 binary container. Masks use the same layout with c=1 and
// values in {0.0, 1.0}.
void write_volume(const std::string& path, const Volume3& v);
Volume3 read_volume(const std::string& path);
void write_mask(const std::string& path, const Mask3& m);
Mask3 read_mask(const std::string& path);

}  // namespace gleve
