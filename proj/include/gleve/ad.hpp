#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <vector>

namespace gleve::ad {

// Dense double-precision tensor. Shapes in use: {n} vectors, {m,n} row-major
// matrices, {c,d0,d1,d2} channel-major spatial blocks.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  Tensor(std::vector<int> s, std::vector<double> data);

  std::int64_t numel() const { return std::int64_t(v.size()); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }
  double& operator[](std::int64_t i) { return v[std::size_t(i)]; }
  double operator[](std::int64_t i) const { return v[std::size_t(i)]; }

  static Tensor scalar(double x) { return Tensor({1}, {x}); }
};

struct Val {
  int id = -1;
  bool ok() const { return id >= 0; }
};

// Reverse-mode tape. Every operation appends a node holding its forward
// value; backward() walks the reachable subgraph once in reverse order.
// Tapes are single-use per backward pass and not thread-safe.
class Tape {
 public:
  Val leaf(Tensor t);

  // elementwise, same shape
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);
  Val div(Val a, Val b);
  Val maximum(Val a, Val b);  // ties route gradient to the first argument
  Val minimum(Val a, Val b);

  Val add_scalar(Val a, double s);
  Val mul_scalar(Val a, double s);

  Val tanh_(Val a);
  Val sigmoid_(Val a);
  Val exp_(Val a);
  Val log_(Val a);
  Val sqrt_(Val a);
  // log(m/(1-m)) with m clamped to [eps, 1-eps]; zero gradient when clamped
  Val logit_(Val a, double eps);

  // 2D
  Val matmul(Val a, Val b);
  Val add_rowvec(Val a, Val b);   // {m,n} + {n}
  Val scale_rows(Val a, Val s);   // {m,n} * s{m}, row-wise
  Val row_sum(Val a);             // {m,n} -> {m}
  Val col_mean(Val a);            // {m,n} -> {n}
  Val col_slice(Val a, int c0, int c1);
  Val gather_rows(Val a, std::vector<int> idx);

  // segment ids must be sorted ascending and contiguous from 0
  Val segment_softmax(Val x, std::vector<int> seg);
  Val segment_sum_rows(Val x, std::vector<int> seg, int nseg);

  Val concat(Val a, Val b);  // flattened 1D concat
  Val sum(Val a);            // -> {1}
  Val mean(Val a);           // -> {1}
  Val reshape(Val a, std::vector<int> shape);
  Val transpose(Val a);  // {m,n} -> {n,m}

  // spatial ops on {c,d0,d1,d2}; kernels are 3x3x3 with zero padding 1
  Val conv3d(Val x, Val k, Val bias);
  Val upsample2(Val x);  // trilinear, matches gleve::upsample2 sampling
  Val avgpool2(Val x);   // spatial dims must be even
  // out-of-range crops read zeros; embed places a block in a zero canvas
  Val crop3(Val x, std::array<int, 3> lo, std::array<int, 3> extent);
  Val embed3(Val x, std::array<int, 3> full, std::array<int, 3> lo);

  const Tensor& value(Val a) const;
  double scalar_value(Val a) const;

  // Seeds dLoss/dLoss = 1 and accumulates gradients for every reachable
  // node. `loss` must hold exactly one element.
  void backward(Val loss);
  const Tensor& grad(Val a) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    kLeaf, kAdd, kSub, kMul, kDiv, kMax, kMin, kAddS, kMulS,
    kTanh, kSigmoid, kExp, kLog, kSqrt, kLogit,
    kMatMul, kAddRow, kScaleRows, kRowSum, kColMean, kColSlice, kGatherRows,
    kSegSoftmax, kSegSumRows, kConcat, kSum, kMean, kReshape, kTranspose,
    kConv3d, kUpsample2, kAvgPool2, kCrop3, kEmbed3,
  };

  struct Node {
    Op op = Op::kLeaf;
    int a = -1, b = -1, c = -1;
    Tensor val;
    Tensor grad;
    double s0 = 0.0;
    int i0 = 0, i1 = 0;
    std::vector<int> idx;
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> ext{0, 0, 0};
  };

  Val push(Node n);
  Node& at(Val v);
  const Node& at(Val v) const;
  void ensure_grad(int id);
  void backprop_node(int id);

  // deque keeps value()/grad() references stable across later pushes
  std::deque<Node> nodes_;
  bool grads_valid_ = false;
};

}  // namespace gleve::ad
