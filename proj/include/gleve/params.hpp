#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gleve/ad.hpp"

namespace gleve {

// Deterministic, platform-independent RNG: splitmix-seeded xoshiro-style
// stream with a Box-Muller normal. std::normal_distribution is
// implementation-defined, which would break bit-exact reruns.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  double uniform();               // [0, 1)
  double normal();                // standard normal
  int uniform_int(int lo, int hi);  // inclusive bounds

 private:
  std::uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t fnv1a(const std::string& s);

// Named parameter tensors. Names are iterated in sorted order everywhere so
// flattening, checkpoints and optimizer state are reproducible.
class ParamStore {
 public:
  // Creates the tensor if missing: gaussian(0, scale) seeded by
  // (seed ^ fnv1a(name)), so init is independent of creation order.
  ad::Tensor& emplace_gaussian(const std::string& name,
                               std::vector<int> shape, double scale,
                               std::uint64_t seed);
  ad::Tensor& emplace_zeros(const std::string& name, std::vector<int> shape);
  ad::Tensor& emplace_const(const std::string& name, std::vector<int> shape,
                            double value);

  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  ad::Tensor& get(const std::string& name);
  const ad::Tensor& get(const std::string& name) const;

  std::vector<std::string> names() const;  // sorted
  std::int64_t total_size() const;

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

  // Flat little-endian f32 payload preceded by a text shape manifest.
  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);

 private:
  std::map<std::string, ad::Tensor> tensors_;
};

// Places every stored tensor on a tape as a leaf so one backward pass yields
// gradients for all parameters by name.
class TapeParams {
 public:
  TapeParams(ad::Tape& tape, const ParamStore& store);

  ad::Val operator[](const std::string& name) const;

  // gradient of `name` after tape.backward(); zeros when unused
  const ad::Tensor& grad(const std::string& name) const;
  const std::map<std::string, ad::Val>& vals() const { return vals_; }

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Val> vals_;
};

}  // namespace gleve
