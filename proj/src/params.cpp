#include "gleve/params.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  // xoshiro256**
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return double(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw ConfigError("uniform_int: empty range");
  const std::uint64_t span = std::uint64_t(hi - lo) + 1;
  return lo + int(next_u64() % span);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

ad::Tensor& ParamStore::emplace_gaussian(const std::string& name,
                                         std::vector<int> shape, double scale,
                                         std::uint64_t seed) {
  auto it = tensors_.find(name);
  if (it != tensors_.end()) return it->second;
  ad::Tensor t(std::move(shape));
  Rng rng(seed ^ fnv1a(name));
  for (auto& x : t.v) x = scale * rng.normal();
  return tensors_.emplace(name, std::move(t)).first->second;
}

ad::Tensor& ParamStore::emplace_zeros(const std::string& name,
                                      std::vector<int> shape) {
  auto it = tensors_.find(name);
  if (it != tensors_.end()) return it->second;
  return tensors_.emplace(name, ad::Tensor(std::move(shape))).first->second;
}

ad::Tensor& ParamStore::emplace_const(const std::string& name,
                                      std::vector<int> shape, double value) {
  auto it = tensors_.find(name);
  if (it != tensors_.end()) return it->second;
  ad::Tensor t(std::move(shape));
  for (auto& x : t.v) x = value;
  return tensors_.emplace(name, std::move(t)).first->second;
}

ad::Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("missing parameter: " + name);
  return it->second;
}

const ad::Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("missing parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& [k, v] : tensors_) n += v.numel();
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(std::size_t(total_size()));
  for (const auto& [k, t] : tensors_)
    flat.insert(flat.end(), t.v.begin(), t.v.end());
  return flat;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (std::int64_t(flat.size()) != total_size()) {
    throw DataError("unflatten: size mismatch");
  }
  std::size_t off = 0;
  for (auto& [k, t] : tensors_) {
    std::copy(flat.begin() + std::ptrdiff_t(off),
              flat.begin() + std::ptrdiff_t(off + t.v.size()), t.v.begin());
    off += t.v.size();
  }
}

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for write: " + path);
  os << "GLEVECKPT01\n" << tensors_.size() << "\n";
  for (const auto& [name, t] : tensors_) {
    os << name << " " << t.shape.size();
    for (int d : t.shape) os << " " << d;
    os << "\n";
  }
  os << "DATA\n";
  for (const auto& [name, t] : tensors_) {
    for (double x : t.v) {
      float f = float(x);
      os.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
  if (!os) throw DataError("short checkpoint write: " + path);
}

ParamStore ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  std::string magic;
  std::getline(is, magic);
  if (magic != "GLEVECKPT01") throw DataError("bad checkpoint magic: " + path);
  std::size_t count = 0;
  is >> count;
  if (!is || count > 100000) throw DataError("bad checkpoint header: " + path);
  ParamStore store;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    std::size_t ndim = 0;
    is >> name >> ndim;
    if (!is || ndim == 0 || ndim > 5) {
      throw DataError("bad checkpoint manifest: " + path);
    }
    std::vector<int> shape(ndim);
    for (auto& d : shape) {
      is >> d;
      if (!is || d <= 0) throw DataError("bad checkpoint shape: " + path);
    }
    store.tensors_.emplace(name, ad::Tensor(shape));
  }
  std::string tag;
  is >> tag;
  is.get();  // newline after DATA
  if (tag != "DATA") throw DataError("bad checkpoint data tag: " + path);
  for (auto& [name, t] : store.tensors_) {
    for (double& x : t.v) {
      float f = 0.0f;
      is.read(reinterpret_cast<char*>(&f), sizeof(float));
      x = double(f);
    }
  }
  if (!is) throw DataError("truncated checkpoint: " + path);
  return store;
}

TapeParams::TapeParams(ad::Tape& tape, const ParamStore& store)
    : tape_(&tape) {
  for (const std::string& name : store.names()) {
    vals_.emplace(name, tape.leaf(store.get(name)));
  }
}

ad::Val TapeParams::operator[](const std::string& name) const {
  auto it = vals_.find(name);
  if (it == vals_.end()) throw DataError("missing tape parameter: " + name);
  return it->second;
}

const ad::Tensor& TapeParams::grad(const std::string& name) const {
  return tape_->grad((*this)[name]);
}

}  // namespace gleve
