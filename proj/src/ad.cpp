#include "gleve/ad.hpp"

#include <cmath>
#include <numeric>

#include "gleve/errors.hpp"

namespace gleve::ad {

namespace {

std::int64_t shape_numel(const std::vector<int>& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

void require(bool cond, const char* msg) {
  if (!cond) throw NumericError(std::string("tape: ") + msg);
}

struct Spatial {
  int c, d0, d1, d2;
  std::int64_t plane() const { return std::int64_t(d0) * d1 * d2; }
  std::int64_t at(int ch, int x, int y, int z) const {
    return ((std::int64_t(ch) * d0 + x) * d1 + y) * d2 + z;
  }
};

Spatial as_spatial(const Tensor& t) {
  require(t.shape.size() == 4, "expected {c,d0,d1,d2} tensor");
  return Spatial{t.shape[0], t.shape[1], t.shape[2], t.shape[3]};
}

// shared by forward/backward of the trilinear upsampling
struct LerpAxis {
  int i0, i1;
  double t;
};

LerpAxis lerp_axis(int o, int n) {
  double s = 0.5 * o - 0.25;
  double fl = std::floor(s);
  double t = s - fl;
  int f = int(fl);
  int i0 = f < 0 ? 0 : (f > n - 1 ? n - 1 : f);
  int i1 = f + 1 < 0 ? 0 : (f + 1 > n - 1 ? n - 1 : f + 1);
  return {i0, i1, t};
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  v.assign(std::size_t(shape_numel(shape)), 0.0);
}

Tensor::Tensor(std::vector<int> s, std::vector<double> data)
    : shape(std::move(s)), v(std::move(data)) {
  if (shape_numel(shape) != std::int64_t(v.size())) {
    throw NumericError("tensor shape/data mismatch");
  }
}

Val Tape::push(Node n) {
  grads_valid_ = false;
  nodes_.push_back(std::move(n));
  return Val{int(nodes_.size()) - 1};
}

Tape::Node& Tape::at(Val v) {
  require(v.ok() && v.id < int(nodes_.size()), "bad value handle");
  return nodes_[std::size_t(v.id)];
}

const Tape::Node& Tape::at(Val v) const {
  require(v.ok() && v.id < int(nodes_.size()), "bad value handle");
  return nodes_[std::size_t(v.id)];
}

Val Tape::leaf(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.val = std::move(t);
  return push(std::move(n));
}

const Tensor& Tape::value(Val a) const { return at(a).val; }

double Tape::scalar_value(Val a) const {
  const Tensor& t = at(a).val;
  require(t.numel() == 1, "scalar_value on non-scalar");
  return t[0];
}

const Tensor& Tape::grad(Val a) const {
  require(grads_valid_, "grad() before backward()");
  const Node& n = at(a);
  static thread_local Tensor zeros;
  if (n.grad.v.empty()) {
    zeros = Tensor(n.val.shape);
    return zeros;
  }
  return n.grad;
}

void Tape::ensure_grad(int id) {
  Node& n = nodes_[std::size_t(id)];
  if (n.grad.v.empty()) n.grad = Tensor(n.val.shape);
}

namespace {

template <typename F>
Tensor elementwise2(const Tensor& a, const Tensor& b, F f, const char* name) {
  require(a.shape == b.shape, name);
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Val Tape::add(Val a, Val b) {
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.val = elementwise2(
      at(a).val, at(b).val, [](double x, double y) { return x + y; },
      "add: shape mismatch");
  return push(std::move(n));
}

Val Tape::sub(Val a, Val b) {
  Node n;
  n.op = Op::kSub;
  n.a = a.id;
  n.b = b.id;
  n.val = elementwise2(
      at(a).val, at(b).val, [](double x, double y) { return x - y; },
      "sub: shape mismatch");
  return push(std::move(n));
}

Val Tape::mul(Val a, Val b) {
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  n.val = elementwise2(
      at(a).val, at(b).val, [](double x, double y) { return x * y; },
      "mul: shape mismatch");
  return push(std::move(n));
}

Val Tape::div(Val a, Val b) {
  Node n;
  n.op = Op::kDiv;
  n.a = a.id;
  n.b = b.id;
  n.val = elementwise2(
      at(a).val, at(b).val, [](double x, double y) { return x / y; },
      "div: shape mismatch");
  return push(std::move(n));
}

Val Tape::maximum(Val a, Val b) {
  Node n;
  n.op = Op::kMax;
  n.a = a.id;
  n.b = b.id;
  n.val = elementwise2(
      at(a).val, at(b).val, [](double x, double y) { return x >= y ? x : y; },
      "maximum: shape mismatch");
  return push(std::move(n));
}

Val Tape::minimum(Val a, Val b) {
  Node n;
  n.op = Op::kMin;
  n.a = a.id;
  n.b = b.id;
  n.val = elementwise2(
      at(a).val, at(b).val, [](double x, double y) { return x <= y ? x : y; },
      "minimum: shape mismatch");
  return push(std::move(n));
}

Val Tape::add_scalar(Val a, double s) {
  const Tensor& ta = at(a).val;
  Node n;
  n.op = Op::kAddS;
  n.a = a.id;
  n.s0 = s;
  n.val = Tensor(ta.shape);
  for (std::int64_t i = 0; i < ta.numel(); ++i) n.val[i] = ta[i] + s;
  return push(std::move(n));
}

Val Tape::mul_scalar(Val a, double s) {
  const Tensor& ta = at(a).val;
  Node n;
  n.op = Op::kMulS;
  n.a = a.id;
  n.s0 = s;
  n.val = Tensor(ta.shape);
  for (std::int64_t i = 0; i < ta.numel(); ++i) n.val[i] = ta[i] * s;
  return push(std::move(n));
}

namespace {

template <typename F>
Tensor elementwise1(const Tensor& a, F f) {
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Val Tape::tanh_(Val a) {
  Node n;
  n.op = Op::kTanh;
  n.a = a.id;
  n.val = elementwise1(at(a).val, [](double x) { return std::tanh(x); });
  return push(std::move(n));
}

Val Tape::sigmoid_(Val a) {
  Node n;
  n.op = Op::kSigmoid;
  n.a = a.id;
  n.val = elementwise1(at(a).val,
                       [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return push(std::move(n));
}

Val Tape::exp_(Val a) {
  Node n;
  n.op = Op::kExp;
  n.a = a.id;
  n.val = elementwise1(at(a).val, [](double x) { return std::exp(x); });
  return push(std::move(n));
}

Val Tape::log_(Val a) {
  Node n;
  n.op = Op::kLog;
  n.a = a.id;
  n.val = elementwise1(at(a).val, [](double x) { return std::log(x); });
  return push(std::move(n));
}

Val Tape::sqrt_(Val a) {
  Node n;
  n.op = Op::kSqrt;
  n.a = a.id;
  n.val = elementwise1(at(a).val, [](double x) { return std::sqrt(x); });
  return push(std::move(n));
}

Val Tape::logit_(Val a, double eps) {
  const Tensor& ta = at(a).val;
  Node n;
  n.op = Op::kLogit;
  n.a = a.id;
  n.s0 = eps;
  n.val = Tensor(ta.shape);
  for (std::int64_t i = 0; i < ta.numel(); ++i) {
    double m = ta[i];
    if (m < eps) m = eps;
    if (m > 1.0 - eps) m = 1.0 - eps;
    n.val[i] = std::log(m / (1.0 - m));
  }
  return push(std::move(n));
}

Val Tape::matmul(Val a, Val b) {
  const Tensor& ta = at(a).val;
  const Tensor& tb = at(b).val;
  require(ta.shape.size() == 2 && tb.shape.size() == 2, "matmul: need 2D");
  require(ta.cols() == tb.rows(), "matmul: inner dim mismatch");
  const int m = ta.rows(), k = ta.cols(), p = tb.cols();
  Node n;
  n.op = Op::kMatMul;
  n.a = a.id;
  n.b = b.id;
  n.val = Tensor({m, p});
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < k; ++t) {
      const double av = ta[std::int64_t(i) * k + t];
      if (av == 0.0) continue;
      for (int j = 0; j < p; ++j)
        n.val[std::int64_t(i) * p + j] += av * tb[std::int64_t(t) * p + j];
    }
  return push(std::move(n));
}

Val Tape::add_rowvec(Val a, Val b) {
  const Tensor& ta = at(a).val;
  const Tensor& tb = at(b).val;
  require(ta.shape.size() == 2, "add_rowvec: need 2D lhs");
  require(tb.numel() == ta.cols(), "add_rowvec: width mismatch");
  Node n;
  n.op = Op::kAddRow;
  n.a = a.id;
  n.b = b.id;
  n.val = Tensor(ta.shape);
  const int m = ta.rows(), c = ta.cols();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j)
      n.val[std::int64_t(i) * c + j] = ta[std::int64_t(i) * c + j] + tb[j];
  return push(std::move(n));
}

Val Tape::scale_rows(Val a, Val s) {
  const Tensor& ta = at(a).val;
  const Tensor& ts = at(s).val;
  require(ta.shape.size() == 2, "scale_rows: need 2D lhs");
  require(ts.numel() == ta.rows(), "scale_rows: height mismatch");
  Node n;
  n.op = Op::kScaleRows;
  n.a = a.id;
  n.b = s.id;
  n.val = Tensor(ta.shape);
  const int m = ta.rows(), c = ta.cols();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j)
      n.val[std::int64_t(i) * c + j] = ta[std::int64_t(i) * c + j] * ts[i];
  return push(std::move(n));
}

Val Tape::row_sum(Val a) {
  const Tensor& ta = at(a).val;
  require(ta.shape.size() == 2, "row_sum: need 2D");
  Node n;
  n.op = Op::kRowSum;
  n.a = a.id;
  n.val = Tensor({ta.rows()});
  const int m = ta.rows(), c = ta.cols();
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += ta[std::int64_t(i) * c + j];
    n.val[i] = acc;
  }
  return push(std::move(n));
}

Val Tape::col_mean(Val a) {
  const Tensor& ta = at(a).val;
  require(ta.shape.size() == 2 && ta.rows() > 0, "col_mean: need 2D");
  Node n;
  n.op = Op::kColMean;
  n.a = a.id;
  n.val = Tensor({ta.cols()});
  const int m = ta.rows(), c = ta.cols();
  for (int j = 0; j < c; ++j) {
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += ta[std::int64_t(i) * c + j];
    n.val[j] = acc / m;
  }
  return push(std::move(n));
}

Val Tape::col_slice(Val a, int c0, int c1) {
  const Tensor& ta = at(a).val;
  require(ta.shape.size() == 2, "col_slice: need 2D");
  require(0 <= c0 && c0 < c1 && c1 <= ta.cols(), "col_slice: bad range");
  Node n;
  n.op = Op::kColSlice;
  n.a = a.id;
  n.i0 = c0;
  n.i1 = c1;
  const int m = ta.rows(), c = ta.cols(), w = c1 - c0;
  n.val = Tensor({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      n.val[std::int64_t(i) * w + j] = ta[std::int64_t(i) * c + c0 + j];
  return push(std::move(n));
}

Val Tape::gather_rows(Val a, std::vector<int> idx) {
  const Tensor& ta = at(a).val;
  require(ta.shape.size() == 2, "gather_rows: need 2D");
  for (int i : idx) require(0 <= i && i < ta.rows(), "gather_rows: bad index");
  Node n;
  n.op = Op::kGatherRows;
  n.a = a.id;
  const int c = ta.cols();
  n.val = Tensor({int(idx.size()), c});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < c; ++j)
      n.val[std::int64_t(r) * c + j] = ta[std::int64_t(idx[r]) * c + j];
  n.idx = std::move(idx);
  return push(std::move(n));
}

Val Tape::segment_softmax(Val x, std::vector<int> seg) {
  const Tensor& tx = at(x).val;
  require(tx.shape.size() == 1, "segment_softmax: need 1D");
  require(int(seg.size()) == tx.numel(), "segment_softmax: seg size");
  for (std::size_t i = 1; i < seg.size(); ++i)
    require(seg[i] >= seg[i - 1], "segment_softmax: segments must be sorted");
  Node n;
  n.op = Op::kSegSoftmax;
  n.a = x.id;
  n.val = Tensor(tx.shape);
  std::size_t i = 0;
  while (i < seg.size()) {
    std::size_t j = i;
    while (j < seg.size() && seg[j] == seg[i]) ++j;
    double mx = tx[std::int64_t(i)];
    for (std::size_t t = i; t < j; ++t) mx = std::max(mx, tx[std::int64_t(t)]);
    double z = 0.0;
    for (std::size_t t = i; t < j; ++t) {
      n.val[std::int64_t(t)] = std::exp(tx[std::int64_t(t)] - mx);
      z += n.val[std::int64_t(t)];
    }
    for (std::size_t t = i; t < j; ++t) n.val[std::int64_t(t)] /= z;
    i = j;
  }
  n.idx = std::move(seg);
  return push(std::move(n));
}

Val Tape::segment_sum_rows(Val x, std::vector<int> seg, int nseg) {
  const Tensor& tx = at(x).val;
  require(tx.shape.size() == 2, "segment_sum_rows: need 2D");
  require(int(seg.size()) == tx.rows(), "segment_sum_rows: seg size");
  for (int s : seg) require(0 <= s && s < nseg, "segment_sum_rows: bad id");
  Node n;
  n.op = Op::kSegSumRows;
  n.a = x.id;
  const int c = tx.cols();
  n.val = Tensor({nseg, c});
  for (int r = 0; r < tx.rows(); ++r)
    for (int j = 0; j < c; ++j)
      n.val[std::int64_t(seg[std::size_t(r)]) * c + j] +=
          tx[std::int64_t(r) * c + j];
  n.idx = std::move(seg);
  return push(std::move(n));
}

Val Tape::concat(Val a, Val b) {
  const Tensor& ta = at(a).val;
  const Tensor& tb = at(b).val;
  Node n;
  n.op = Op::kConcat;
  n.a = a.id;
  n.b = b.id;
  n.val = Tensor({int(ta.numel() + tb.numel())});
  for (std::int64_t i = 0; i < ta.numel(); ++i) n.val[i] = ta[i];
  for (std::int64_t i = 0; i < tb.numel(); ++i) n.val[ta.numel() + i] = tb[i];
  return push(std::move(n));
}

Val Tape::sum(Val a) {
  const Tensor& ta = at(a).val;
  Node n;
  n.op = Op::kSum;
  n.a = a.id;
  n.val = Tensor({1});
  double acc = 0.0;
  for (std::int64_t i = 0; i < ta.numel(); ++i) acc += ta[i];
  n.val[0] = acc;
  return push(std::move(n));
}

Val Tape::mean(Val a) {
  const Tensor& ta = at(a).val;
  require(ta.numel() > 0, "mean of empty tensor");
  Node n;
  n.op = Op::kMean;
  n.a = a.id;
  n.val = Tensor({1});
  double acc = 0.0;
  for (std::int64_t i = 0; i < ta.numel(); ++i) acc += ta[i];
  n.val[0] = acc / double(ta.numel());
  return push(std::move(n));
}

Val Tape::reshape(Val a, std::vector<int> shape) {
  const Tensor& ta = at(a).val;
  require(shape_numel(shape) == ta.numel(), "reshape: numel mismatch");
  Node n;
  n.op = Op::kReshape;
  n.a = a.id;
  n.val = Tensor(std::move(shape), ta.v);
  return push(std::move(n));
}

Val Tape::transpose(Val a) {
  const Tensor& ta = at(a).val;
  require(ta.shape.size() == 2, "transpose: need 2D");
  Node n;
  n.op = Op::kTranspose;
  n.a = a.id;
  const int m = ta.rows(), c = ta.cols();
  n.val = Tensor({c, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j)
      n.val[std::int64_t(j) * m + i] = ta[std::int64_t(i) * c + j];
  return push(std::move(n));
}

Val Tape::conv3d(Val x, Val k, Val bias) {
  const Tensor& tx = at(x).val;
  const Tensor& tk = at(k).val;
  const Tensor& tb = at(bias).val;
  const Spatial sx = as_spatial(tx);
  require(tk.shape.size() == 5 && tk.shape[2] == 3 && tk.shape[3] == 3 &&
              tk.shape[4] == 3,
          "conv3d: kernel must be {co,ci,3,3,3}");
  require(tk.shape[1] == sx.c, "conv3d: input channel mismatch");
  require(tb.numel() == tk.shape[0], "conv3d: bias size mismatch");
  const int co = tk.shape[0], ci = sx.c;
  Node n;
  n.op = Op::kConv3d;
  n.a = x.id;
  n.b = k.id;
  n.c = bias.id;
  n.val = Tensor({co, sx.d0, sx.d1, sx.d2});
  const Spatial sy{co, sx.d0, sx.d1, sx.d2};
  for (int o = 0; o < co; ++o)
    for (int px = 0; px < sx.d0; ++px)
      for (int py = 0; py < sx.d1; ++py)
        for (int pz = 0; pz < sx.d2; ++pz) {
          double acc = tb[o];
          for (int i = 0; i < ci; ++i)
            for (int dx = -1; dx <= 1; ++dx) {
              int qx = px + dx;
              if (qx < 0 || qx >= sx.d0) continue;
              for (int dy = -1; dy <= 1; ++dy) {
                int qy = py + dy;
                if (qy < 0 || qy >= sx.d1) continue;
                for (int dz = -1; dz <= 1; ++dz) {
                  int qz = pz + dz;
                  if (qz < 0 || qz >= sx.d2) continue;
                  const std::int64_t kidx =
                      ((((std::int64_t(o) * ci + i) * 3) + dx + 1) * 3 + dy +
                       1) *
                          3 +
                      dz + 1;
                  acc += tx[sx.at(i, qx, qy, qz)] * tk[kidx];
                }
              }
            }
          n.val[sy.at(o, px, py, pz)] = acc;
        }
  return push(std::move(n));
}

Val Tape::upsample2(Val x) {
  const Tensor& tx = at(x).val;
  const Spatial s = as_spatial(tx);
  Node n;
  n.op = Op::kUpsample2;
  n.a = x.id;
  n.val = Tensor({s.c, 2 * s.d0, 2 * s.d1, 2 * s.d2});
  const Spatial so{s.c, 2 * s.d0, 2 * s.d1, 2 * s.d2};
  for (int ox = 0; ox < so.d0; ++ox) {
    LerpAxis ax = lerp_axis(ox, s.d0);
    for (int oy = 0; oy < so.d1; ++oy) {
      LerpAxis ay = lerp_axis(oy, s.d1);
      for (int oz = 0; oz < so.d2; ++oz) {
        LerpAxis az = lerp_axis(oz, s.d2);
        for (int c = 0; c < s.c; ++c) {
          double acc = 0.0;
          for (int bx = 0; bx < 2; ++bx)
            for (int by = 0; by < 2; ++by)
              for (int bz = 0; bz < 2; ++bz) {
                double w = (bx ? ax.t : 1 - ax.t) * (by ? ay.t : 1 - ay.t) *
                           (bz ? az.t : 1 - az.t);
                acc += w * tx[s.at(c, bx ? ax.i1 : ax.i0, by ? ay.i1 : ay.i0,
                                   bz ? az.i1 : az.i0)];
              }
          n.val[so.at(c, ox, oy, oz)] = acc;
        }
      }
    }
  }
  return push(std::move(n));
}

Val Tape::avgpool2(Val x) {
  const Tensor& tx = at(x).val;
  const Spatial s = as_spatial(tx);
  require(s.d0 % 2 == 0 && s.d1 % 2 == 0 && s.d2 % 2 == 0,
          "avgpool2: dims must be even");
  Node n;
  n.op = Op::kAvgPool2;
  n.a = x.id;
  n.val = Tensor({s.c, s.d0 / 2, s.d1 / 2, s.d2 / 2});
  const Spatial so{s.c, s.d0 / 2, s.d1 / 2, s.d2 / 2};
  for (int c = 0; c < s.c; ++c)
    for (int ox = 0; ox < so.d0; ++ox)
      for (int oy = 0; oy < so.d1; ++oy)
        for (int oz = 0; oz < so.d2; ++oz) {
          double acc = 0.0;
          for (int bx = 0; bx < 2; ++bx)
            for (int by = 0; by < 2; ++by)
              for (int bz = 0; bz < 2; ++bz)
                acc += tx[s.at(c, 2 * ox + bx, 2 * oy + by, 2 * oz + bz)];
          n.val[so.at(c, ox, oy, oz)] = acc / 8.0;
        }
  return push(std::move(n));
}

Val Tape::crop3(Val x, std::array<int, 3> lo, std::array<int, 3> extent) {
  const Tensor& tx = at(x).val;
  const Spatial s = as_spatial(tx);
  require(extent[0] > 0 && extent[1] > 0 && extent[2] > 0, "crop3: extent");
  Node n;
  n.op = Op::kCrop3;
  n.a = x.id;
  n.lo = lo;
  n.ext = extent;
  n.val = Tensor({s.c, extent[0], extent[1], extent[2]});
  const Spatial so{s.c, extent[0], extent[1], extent[2]};
  for (int c = 0; c < s.c; ++c)
    for (int ox = 0; ox < extent[0]; ++ox) {
      int px = lo[0] + ox;
      if (px < 0 || px >= s.d0) continue;
      for (int oy = 0; oy < extent[1]; ++oy) {
        int py = lo[1] + oy;
        if (py < 0 || py >= s.d1) continue;
        for (int oz = 0; oz < extent[2]; ++oz) {
          int pz = lo[2] + oz;
          if (pz < 0 || pz >= s.d2) continue;
          n.val[so.at(c, ox, oy, oz)] = tx[s.at(c, px, py, pz)];
        }
      }
    }
  return push(std::move(n));
}

Val Tape::embed3(Val x, std::array<int, 3> full, std::array<int, 3> lo) {
  const Tensor& tx = at(x).val;
  const Spatial s = as_spatial(tx);
  require(lo[0] >= 0 && lo[1] >= 0 && lo[2] >= 0 && lo[0] + s.d0 <= full[0] &&
              lo[1] + s.d1 <= full[1] && lo[2] + s.d2 <= full[2],
          "embed3: block must fit in canvas");
  Node n;
  n.op = Op::kEmbed3;
  n.a = x.id;
  n.lo = lo;
  n.ext = {s.d0, s.d1, s.d2};
  n.val = Tensor({s.c, full[0], full[1], full[2]});
  const Spatial so{s.c, full[0], full[1], full[2]};
  for (int c = 0; c < s.c; ++c)
    for (int ox = 0; ox < s.d0; ++ox)
      for (int oy = 0; oy < s.d1; ++oy)
        for (int oz = 0; oz < s.d2; ++oz)
          n.val[so.at(c, lo[0] + ox, lo[1] + oy, lo[2] + oz)] =
              tx[s.at(c, ox, oy, oz)];
  return push(std::move(n));
}

void Tape::backward(Val loss) {
  require(at(loss).val.numel() == 1, "backward: loss must be scalar");
  for (Node& n : nodes_) n.grad = Tensor();

  // reachability from the loss
  std::vector<char> needed(nodes_.size(), 0);
  std::vector<int> stack{loss.id};
  needed[std::size_t(loss.id)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    const Node& n = nodes_[std::size_t(id)];
    for (int in : {n.a, n.b, n.c}) {
      if (in >= 0 && !needed[std::size_t(in)]) {
        needed[std::size_t(in)] = 1;
        stack.push_back(in);
      }
    }
  }

  ensure_grad(loss.id);
  nodes_[std::size_t(loss.id)].grad[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    if (!needed[std::size_t(id)]) continue;
    if (nodes_[std::size_t(id)].grad.v.empty()) continue;
    backprop_node(id);
  }
  grads_valid_ = true;
}

void Tape::backprop_node(int id) {
  Node& n = nodes_[std::size_t(id)];
  const Tensor& g = n.grad;
  auto ga = [&]() -> Tensor& {
    ensure_grad(n.a);
    return nodes_[std::size_t(n.a)].grad;
  };
  auto gb = [&]() -> Tensor& {
    ensure_grad(n.b);
    return nodes_[std::size_t(n.b)].grad;
  };
  auto gc = [&]() -> Tensor& {
    ensure_grad(n.c);
    return nodes_[std::size_t(n.c)].grad;
  };
  auto va = [&]() -> const Tensor& { return nodes_[std::size_t(n.a)].val; };
  auto vb = [&]() -> const Tensor& { return nodes_[std::size_t(n.b)].val; };

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        da[i] += g[i];
        db[i] += g[i];
      }
      break;
    }
    case Op::kSub: {
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        da[i] += g[i];
        db[i] -= g[i];
      }
      break;
    }
    case Op::kMul: {
      const Tensor &a = va(), &b = vb();
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        da[i] += g[i] * b[i];
        db[i] += g[i] * a[i];
      }
      break;
    }
    case Op::kDiv: {
      const Tensor &a = va(), &b = vb();
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        da[i] += g[i] / b[i];
        db[i] -= g[i] * a[i] / (b[i] * b[i]);
      }
      break;
    }
    case Op::kMax: {
      const Tensor &a = va(), &b = vb();
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        if (a[i] >= b[i])
          da[i] += g[i];
        else
          db[i] += g[i];
      }
      break;
    }
    case Op::kMin: {
      const Tensor &a = va(), &b = vb();
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        if (a[i] <= b[i])
          da[i] += g[i];
        else
          db[i] += g[i];
      }
      break;
    }
    case Op::kAddS: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
      break;
    }
    case Op::kMulS: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * n.s0;
      break;
    }
    case Op::kTanh: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        da[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
      break;
    }
    case Op::kSigmoid: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        da[i] += g[i] * n.val[i] * (1.0 - n.val[i]);
      break;
    }
    case Op::kExp: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * n.val[i];
      break;
    }
    case Op::kLog: {
      const Tensor& a = va();
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] / a[i];
      break;
    }
    case Op::kSqrt: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        da[i] += g[i] * 0.5 / n.val[i];
      break;
    }
    case Op::kLogit: {
      const Tensor& a = va();
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        double m = a[i];
        if (m > n.s0 && m < 1.0 - n.s0) da[i] += g[i] / (m * (1.0 - m));
      }
      break;
    }
    case Op::kMatMul: {
      const Tensor &a = va(), &b = vb();
      Tensor &da = ga(), &db = gb();
      const int m = a.rows(), k = a.cols(), p = b.cols();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j) {
          const double gv = g[std::int64_t(i) * p + j];
          if (gv == 0.0) continue;
          for (int t = 0; t < k; ++t) {
            da[std::int64_t(i) * k + t] += gv * b[std::int64_t(t) * p + j];
            db[std::int64_t(t) * p + j] += gv * a[std::int64_t(i) * k + t];
          }
        }
      break;
    }
    case Op::kAddRow: {
      Tensor &da = ga(), &db = gb();
      const int m = n.val.rows(), c = n.val.cols();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) {
          da[std::int64_t(i) * c + j] += g[std::int64_t(i) * c + j];
          db[j] += g[std::int64_t(i) * c + j];
        }
      break;
    }
    case Op::kScaleRows: {
      const Tensor &a = va(), &s = vb();
      Tensor &da = ga(), &ds = gb();
      const int m = n.val.rows(), c = n.val.cols();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) {
          da[std::int64_t(i) * c + j] += g[std::int64_t(i) * c + j] * s[i];
          ds[i] += g[std::int64_t(i) * c + j] * a[std::int64_t(i) * c + j];
        }
      break;
    }
    case Op::kRowSum: {
      const Tensor& a = va();
      Tensor& da = ga();
      const int m = a.rows(), c = a.cols();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) da[std::int64_t(i) * c + j] += g[i];
      break;
    }
    case Op::kColMean: {
      const Tensor& a = va();
      Tensor& da = ga();
      const int m = a.rows(), c = a.cols();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) da[std::int64_t(i) * c + j] += g[j] / m;
      break;
    }
    case Op::kColSlice: {
      const Tensor& a = va();
      Tensor& da = ga();
      const int m = a.rows(), c = a.cols(), w = n.i1 - n.i0;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          da[std::int64_t(i) * c + n.i0 + j] += g[std::int64_t(i) * w + j];
      break;
    }
    case Op::kGatherRows: {
      Tensor& da = ga();
      const int c = n.val.cols();
      for (std::size_t r = 0; r < n.idx.size(); ++r)
        for (int j = 0; j < c; ++j)
          da[std::int64_t(n.idx[r]) * c + j] += g[std::int64_t(r) * c + j];
      break;
    }
    case Op::kSegSoftmax: {
      Tensor& da = ga();
      std::size_t i = 0;
      while (i < n.idx.size()) {
        std::size_t j = i;
        while (j < n.idx.size() && n.idx[j] == n.idx[i]) ++j;
        double dot = 0.0;
        for (std::size_t t = i; t < j; ++t)
          dot += g[std::int64_t(t)] * n.val[std::int64_t(t)];
        for (std::size_t t = i; t < j; ++t)
          da[std::int64_t(t)] +=
              n.val[std::int64_t(t)] * (g[std::int64_t(t)] - dot);
        i = j;
      }
      break;
    }
    case Op::kSegSumRows: {
      Tensor& da = ga();
      const int c = n.val.cols();
      for (std::size_t r = 0; r < n.idx.size(); ++r)
        for (int j = 0; j < c; ++j)
          da[std::int64_t(r) * c + j] += g[std::int64_t(n.idx[r]) * c + j];
      break;
    }
    case Op::kConcat: {
      const Tensor& a = va();
      Tensor &da = ga(), &db = gb();
      for (std::int64_t i = 0; i < a.numel(); ++i) da[i] += g[i];
      for (std::int64_t i = 0; i < db.numel(); ++i)
        db[i] += g[a.numel() + i];
      break;
    }
    case Op::kSum: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g[0];
      break;
    }
    case Op::kMean: {
      Tensor& da = ga();
      const double w = 1.0 / double(da.numel());
      for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g[0] * w;
      break;
    }
    case Op::kReshape: {
      Tensor& da = ga();
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
      break;
    }
    case Op::kTranspose: {
      Tensor& da = ga();
      const int c = n.val.rows(), m = n.val.cols();
      for (int j = 0; j < c; ++j)
        for (int i = 0; i < m; ++i)
          da[std::int64_t(i) * c + j] += g[std::int64_t(j) * m + i];
      break;
    }
    case Op::kConv3d: {
      const Tensor &x = va(), &k = vb();
      Tensor &dx = ga(), &dk = gb(), &db = gc();
      const Spatial sx = as_spatial(x);
      const int co = k.shape[0], ci = sx.c;
      const Spatial sy{co, sx.d0, sx.d1, sx.d2};
      for (int o = 0; o < co; ++o)
        for (int px = 0; px < sx.d0; ++px)
          for (int py = 0; py < sx.d1; ++py)
            for (int pz = 0; pz < sx.d2; ++pz) {
              const double gv = g[sy.at(o, px, py, pz)];
              if (gv == 0.0) continue;
              db[o] += gv;
              for (int i = 0; i < ci; ++i)
                for (int dxo = -1; dxo <= 1; ++dxo) {
                  int qx = px + dxo;
                  if (qx < 0 || qx >= sx.d0) continue;
                  for (int dyo = -1; dyo <= 1; ++dyo) {
                    int qy = py + dyo;
                    if (qy < 0 || qy >= sx.d1) continue;
                    for (int dzo = -1; dzo <= 1; ++dzo) {
                      int qz = pz + dzo;
                      if (qz < 0 || qz >= sx.d2) continue;
                      const std::int64_t kidx =
                          ((((std::int64_t(o) * ci + i) * 3) + dxo + 1) * 3 +
                           dyo + 1) *
                              3 +
                          dzo + 1;
                      dx[sx.at(i, qx, qy, qz)] += gv * k[kidx];
                      dk[kidx] += gv * x[sx.at(i, qx, qy, qz)];
                    }
                  }
                }
            }
      break;
    }
    case Op::kUpsample2: {
      const Tensor& x = va();
      Tensor& dx = ga();
      const Spatial s = as_spatial(x);
      const Spatial so{s.c, 2 * s.d0, 2 * s.d1, 2 * s.d2};
      for (int ox = 0; ox < so.d0; ++ox) {
        LerpAxis axx = lerp_axis(ox, s.d0);
        for (int oy = 0; oy < so.d1; ++oy) {
          LerpAxis ayy = lerp_axis(oy, s.d1);
          for (int oz = 0; oz < so.d2; ++oz) {
            LerpAxis azz = lerp_axis(oz, s.d2);
            for (int c = 0; c < s.c; ++c) {
              const double gv = g[so.at(c, ox, oy, oz)];
              if (gv == 0.0) continue;
              for (int bx = 0; bx < 2; ++bx)
                for (int by = 0; by < 2; ++by)
                  for (int bz = 0; bz < 2; ++bz) {
                    double w = (bx ? axx.t : 1 - axx.t) *
                               (by ? ayy.t : 1 - ayy.t) *
                               (bz ? azz.t : 1 - azz.t);
                    dx[s.at(c, bx ? axx.i1 : axx.i0, by ? ayy.i1 : ayy.i0,
                            bz ? azz.i1 : azz.i0)] += gv * w;
                  }
            }
          }
        }
      }
      break;
    }
    case Op::kAvgPool2: {
      const Tensor& x = va();
      Tensor& dx = ga();
      const Spatial s = as_spatial(x);
      const Spatial so{s.c, s.d0 / 2, s.d1 / 2, s.d2 / 2};
      for (int c = 0; c < s.c; ++c)
        for (int ox = 0; ox < so.d0; ++ox)
          for (int oy = 0; oy < so.d1; ++oy)
            for (int oz = 0; oz < so.d2; ++oz) {
              const double gv = g[so.at(c, ox, oy, oz)] / 8.0;
              for (int bx = 0; bx < 2; ++bx)
                for (int by = 0; by < 2; ++by)
                  for (int bz = 0; bz < 2; ++bz)
                    dx[s.at(c, 2 * ox + bx, 2 * oy + by, 2 * oz + bz)] += gv;
            }
      break;
    }
    case Op::kCrop3: {
      const Tensor& x = va();
      Tensor& dx = ga();
      const Spatial s = as_spatial(x);
      const Spatial so{s.c, n.ext[0], n.ext[1], n.ext[2]};
      for (int c = 0; c < s.c; ++c)
        for (int ox = 0; ox < n.ext[0]; ++ox) {
          int px = n.lo[0] + ox;
          if (px < 0 || px >= s.d0) continue;
          for (int oy = 0; oy < n.ext[1]; ++oy) {
            int py = n.lo[1] + oy;
            if (py < 0 || py >= s.d1) continue;
            for (int oz = 0; oz < n.ext[2]; ++oz) {
              int pz = n.lo[2] + oz;
              if (pz < 0 || pz >= s.d2) continue;
              dx[s.at(c, px, py, pz)] += g[so.at(c, ox, oy, oz)];
            }
          }
        }
      break;
    }
    case Op::kEmbed3: {
      const Tensor& x = va();
      Tensor& dx = ga();
      const Spatial s = as_spatial(x);
      const Spatial so = as_spatial(n.val);
      for (int c = 0; c < s.c; ++c)
        for (int ox = 0; ox < s.d0; ++ox)
          for (int oy = 0; oy < s.d1; ++oy)
            for (int oz = 0; oz < s.d2; ++oz)
              dx[s.at(c, ox, oy, oz)] +=
                  g[so.at(c, n.lo[0] + ox, n.lo[1] + oy, n.lo[2] + oz)];
      break;
    }
  }
}

}  // namespace gleve::ad
