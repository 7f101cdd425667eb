#pragma once

// Reverse-mode automatic differentiation on Eigen matrices.
//
// A Graph is a tape of nodes created by forward operations. Every node holds
// its value; nodes that require gradients lazily allocate a gradient buffer
// during the backward sweep. Parameters accumulate their gradients directly
// into Param::grad so one tape can serve a whole mini-batch.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "trap/common.hpp"

namespace trap::ad {

using Matrix = Eigen::MatrixXd;

/// A trainable tensor. `grad` is kept allocated and zeroed by the owner.
struct Param {
  Matrix value;
  Matrix grad;
  std::string name;

  Param() = default;
  Param(Matrix v, std::string n = "") : value(std::move(v)), name(std::move(n)) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

class Graph;

/// Lightweight handle to a node on the tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  using BackFn = std::function<void(Graph&, const Matrix&)>;

  Graph() { nodes_.reserve(1024); }

  // ---- leaves ----------------------------------------------------------

  Var param(Param& p) {
    Node n;
    n.ext = &p.value;
    n.ext_grad = &p.grad;
    n.needs_grad = true;
    return push(std::move(n));
  }

  Var constant(Matrix m) {
    Node n;
    n.owned = std::move(m);
    return push(std::move(n));
  }

  /// Caller guarantees `m` outlives the graph.
  Var constant_ref(const Matrix& m) {
    Node n;
    n.ext = &m;
    return push(std::move(n));
  }

  Var scalar_const(double s) { return constant(Matrix::Constant(1, 1, s)); }

  // ---- access ----------------------------------------------------------

  const Matrix& val(Var v) const {
    const Node& n = nodes_[check(v)];
    return n.ext ? *n.ext : n.owned;
  }
  double scalar(Var v) const {
    const Matrix& m = val(v);
    if (m.size() != 1) throw dim_error("scalar() on non-1x1 node");
    return m(0, 0);
  }
  Eigen::Index rows(Var v) const { return val(v).rows(); }
  Eigen::Index cols(Var v) const { return val(v).cols(); }
  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  /// Gradient of a node after backward(); zero matrix if it was never reached.
  Matrix grad_of(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.ext_grad) return *n.ext_grad;
    if (n.grad.size() == 0) return Matrix::Zero(val(v).rows(), val(v).cols());
    return n.grad;
  }

  /// Accumulate into a node's gradient buffer (no-op when grads not required).
  template <class E>
  void accum(Var v, const Eigen::MatrixBase<E>& g) {
    Node& n = nodes_[check(v)];
    if (!n.needs_grad) return;
    if (n.ext_grad) {
      *n.ext_grad += g;
      return;
    }
    if (n.grad.size() == 0) n.grad = Matrix::Zero(val(v).rows(), val(v).cols());
    n.grad += g;
  }

  // ---- generic node construction ----------------------------------------

  /// Attach a node with a custom backward. `back` receives this node's
  /// output gradient and must accum() into the parents it captured.
  Var custom(Matrix value, bool needs_grad, BackFn back) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    return push(std::move(n));
  }

  // ---- arithmetic --------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.cols() != B.rows()) throw dim_error("matmul: inner dims disagree");
    Matrix out = A * B;
    return custom(std::move(out), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    g.accum(a, go * g.val(b).transpose());
                    g.accum(b, g.val(a).transpose() * go);
                  });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.cols() != B.cols()) throw dim_error("matmul_nt: inner dims disagree");
    Matrix out = A * B.transpose();
    return custom(std::move(out), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    g.accum(a, go * g.val(b));
                    g.accum(b, go.transpose() * g.val(a));
                  });
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return custom(val(a) + val(b), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    g.accum(a, go);
                    g.accum(b, go);
                  });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return custom(val(a) - val(b), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    g.accum(a, go);
                    g.accum(b, -go);
                  });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return custom(val(a).cwiseProduct(val(b)), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    g.accum(a, go.cwiseProduct(g.val(b)));
                    g.accum(b, go.cwiseProduct(g.val(a)));
                  });
  }

  Var div(Var a, Var b) {
    same_shape(a, b, "div");
    return custom(val(a).cwiseQuotient(val(b)), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    const Matrix& B = g.val(b);
                    g.accum(a, go.cwiseQuotient(B));
                    g.accum(b, -go.cwiseProduct(g.val(a)).cwiseQuotient(B.cwiseProduct(B)));
                  });
  }

  /// Broadcast-add a 1xC row vector to every row of a.
  Var add_rowvec(Var a, Var r) {
    const Matrix& A = val(a);
    const Matrix& R = val(r);
    if (R.rows() != 1 || R.cols() != A.cols()) throw dim_error("add_rowvec: shape");
    Matrix out = A.rowwise() + R.row(0);
    return custom(std::move(out), needs_grad(a) || needs_grad(r),
                  [a, r](Graph& g, const Matrix& go) {
                    g.accum(a, go);
                    g.accum(r, go.colwise().sum());
                  });
  }

  Var scale(Var a, double s) {
    return custom(val(a) * s, needs_grad(a),
                  [a, s](Graph& g, const Matrix& go) { g.accum(a, go * s); });
  }

  Var add_const(Var a, double c) {
    return custom((val(a).array() + c).matrix(), needs_grad(a),
                  [a](Graph& g, const Matrix& go) { g.accum(a, go); });
  }

  // ---- elementwise nonlinearities ----------------------------------------

  Var sigmoid(Var a) {
    Matrix y = val(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    Var out = custom(std::move(y), needs_grad(a), nullptr);
    set_back(out, [a, out](Graph& g, const Matrix& go) {
      const Matrix& Y = g.val(out);
      g.accum(a, go.cwiseProduct(Y.cwiseProduct(Matrix::Ones(Y.rows(), Y.cols()) - Y)));
    });
    return out;
  }

  Var relu(Var a) {
    return custom(val(a).cwiseMax(0.0), needs_grad(a),
                  [a](Graph& g, const Matrix& go) {
                    g.accum(a, go.cwiseProduct(
                                   (g.val(a).array() > 0.0).cast<double>().matrix()));
                  });
  }

  /// log(1 + e^x), evaluated stably
  Var softplus(Var a) {
    Matrix y = val(a).unaryExpr(
        [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
    return custom(std::move(y), needs_grad(a),
                  [a](Graph& g, const Matrix& go) {
                    g.accum(a, go.cwiseProduct(g.val(a).unaryExpr(
                                   [](double x) { return 1.0 / (1.0 + std::exp(-x)); })));
                  });
  }

  Var exp(Var a) {
    Matrix y = val(a).array().exp().matrix();
    Var out = custom(std::move(y), needs_grad(a), nullptr);
    set_back(out, [a, out](Graph& g, const Matrix& go) {
      g.accum(a, go.cwiseProduct(g.val(out)));
    });
    return out;
  }

  Var square(Var a) {
    return custom(val(a).cwiseProduct(val(a)), needs_grad(a),
                  [a](Graph& g, const Matrix& go) {
                    g.accum(a, 2.0 * go.cwiseProduct(g.val(a)));
                  });
  }

  Var abs(Var a) {
    return custom(val(a).cwiseAbs(), needs_grad(a),
                  [a](Graph& g, const Matrix& go) {
                    g.accum(a, go.cwiseProduct(g.val(a).unaryExpr([](double x) {
                      return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                    })));
                  });
  }

  /// elementwise max; ties route the gradient to `a`
  Var max_ew(Var a, Var b) {
    same_shape(a, b, "max_ew");
    return custom(val(a).cwiseMax(val(b)), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    Matrix sel = (g.val(a).array() >= g.val(b).array()).cast<double>().matrix();
                    g.accum(a, go.cwiseProduct(sel));
                    g.accum(b, go.cwiseProduct(Matrix::Ones(sel.rows(), sel.cols()) - sel));
                  });
  }

  /// elementwise min; ties route the gradient to `a`
  Var min_ew(Var a, Var b) {
    same_shape(a, b, "min_ew");
    return custom(val(a).cwiseMin(val(b)), needs_grad(a) || needs_grad(b),
                  [a, b](Graph& g, const Matrix& go) {
                    Matrix sel = (g.val(a).array() <= g.val(b).array()).cast<double>().matrix();
                    g.accum(a, go.cwiseProduct(sel));
                    g.accum(b, go.cwiseProduct(Matrix::Ones(sel.rows(), sel.cols()) - sel));
                  });
  }

  // ---- reductions / normalizers ------------------------------------------

  Var sum(Var a) {
    return custom(Matrix::Constant(1, 1, val(a).sum()), needs_grad(a),
                  [a](Graph& g, const Matrix& go) {
                    g.accum(a, Matrix::Constant(g.val(a).rows(), g.val(a).cols(), go(0, 0)));
                  });
  }

  Var mean_rows(Var a) {
    const Matrix& A = val(a);
    Matrix out = A.colwise().mean();
    return custom(std::move(out), needs_grad(a),
                  [a](Graph& g, const Matrix& go) {
                    double inv = 1.0 / double(g.val(a).rows());
                    g.accum(a, (go * inv).replicate(g.val(a).rows(), 1));
                  });
  }

  Var softmax_rows(Var a) {
    const Matrix& A = val(a);
    Matrix y(A.rows(), A.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      Eigen::RowVectorXd r = A.row(i);
      double m = r.maxCoeff();
      Eigen::RowVectorXd e = (r.array() - m).exp().matrix();
      y.row(i) = e / e.sum();
    }
    Var out = custom(std::move(y), needs_grad(a), nullptr);
    set_back(out, [a, out](Graph& g, const Matrix& go) {
      const Matrix& Y = g.val(out);
      Matrix da(Y.rows(), Y.cols());
      for (Eigen::Index i = 0; i < Y.rows(); ++i) {
        double dot = go.row(i).dot(Y.row(i));
        da.row(i) = Y.row(i).cwiseProduct((go.row(i).array() - dot).matrix());
      }
      g.accum(a, da);
    });
    return out;
  }

  /// Rows rescaled to unit L2 norm.
  Var l2_normalize_rows(Var a, double eps = 1e-12) {
    const Matrix& A = val(a);
    Matrix y(A.rows(), A.cols());
    Eigen::VectorXd inv(A.rows());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      double n = std::sqrt(A.row(i).squaredNorm() + eps);
      inv(i) = 1.0 / n;
      y.row(i) = A.row(i) * inv(i);
    }
    Var out = custom(std::move(y), needs_grad(a), nullptr);
    Matrix invm = inv;
    set_back(out, [a, out, invm](Graph& g, const Matrix& go) {
      const Matrix& Y = g.val(out);
      Matrix da(Y.rows(), Y.cols());
      for (Eigen::Index i = 0; i < Y.rows(); ++i) {
        double dot = go.row(i).dot(Y.row(i));
        da.row(i) = (go.row(i) - dot * Y.row(i)) * invm(i, 0);
      }
      g.accum(a, da);
    });
    return out;
  }

  /// Multiply every entry by a 1x1 node.
  Var scale_by(Var a, Var s) {
    if (val(s).size() != 1) throw dim_error("scale_by: scalar must be 1x1");
    return custom(val(a) * val(s)(0, 0), needs_grad(a) || needs_grad(s),
                  [a, s](Graph& g, const Matrix& go) {
                    g.accum(a, go * g.val(s)(0, 0));
                    g.accum(s, Matrix::Constant(1, 1, go.cwiseProduct(g.val(a)).sum()));
                  });
  }

  /// Add a 1x1 node to every entry.
  Var add_scalar(Var a, Var s) {
    if (val(s).size() != 1) throw dim_error("add_scalar: scalar must be 1x1");
    return custom((val(a).array() + val(s)(0, 0)).matrix(), needs_grad(a) || needs_grad(s),
                  [a, s](Graph& g, const Matrix& go) {
                    g.accum(a, go);
                    g.accum(s, Matrix::Constant(1, 1, go.sum()));
                  });
  }

  /// Per-row layer norm with affine transform; gamma/beta are 1xC.
  Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Matrix& X = val(x);
    const Matrix& G = val(gamma);
    const Matrix& B = val(beta);
    if (G.rows() != 1 || B.rows() != 1 || G.cols() != X.cols() || B.cols() != X.cols())
      throw dim_error("layernorm_rows: affine shape");
    Eigen::Index R = X.rows(), C = X.cols();
    Matrix h(R, C);
    Eigen::VectorXd inv_sd(R);
    for (Eigen::Index i = 0; i < R; ++i) {
      double mu = X.row(i).mean();
      double var = (X.row(i).array() - mu).square().mean();
      double is = 1.0 / std::sqrt(var + eps);
      inv_sd(i) = is;
      h.row(i) = ((X.row(i).array() - mu) * is).matrix();
    }
    Matrix out = ((h.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array()).matrix();
    Var hv = custom(std::move(h), false, nullptr);  // stash normalized rows
    Var ov = custom(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta),
                    nullptr);
    Matrix isd = inv_sd;
    set_back(ov, [x, gamma, beta, hv, isd](Graph& g, const Matrix& go) {
      const Matrix& H = g.val(hv);
      const Matrix& G = g.val(gamma);
      Eigen::Index R = H.rows(), C = H.cols();
      g.accum(gamma, (go.cwiseProduct(H)).colwise().sum());
      g.accum(beta, go.colwise().sum());
      if (!g.needs_grad(x)) return;
      Matrix dx(R, C);
      for (Eigen::Index i = 0; i < R; ++i) {
        Eigen::RowVectorXd gp = go.row(i).cwiseProduct(G.row(0));
        double m1 = gp.mean();
        double m2 = gp.cwiseProduct(H.row(i)).mean();
        dx.row(i) = ((gp.array() - m1 - H.row(i).array() * m2) * isd(i, 0)).matrix();
      }
      g.accum(x, dx);
    });
    return ov;
  }

  // ---- structural ops ------------------------------------------------------

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw dim_error("concat_rows: empty");
    Eigen::Index C = cols(parts[0]), R = 0;
    bool ng = false;
    for (Var p : parts) {
      if (cols(p) != C) throw dim_error("concat_rows: col mismatch");
      R += rows(p);
      ng = ng || needs_grad(p);
    }
    Matrix out(R, C);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, rows(p)) = val(p);
      r += rows(p);
    }
    std::vector<Var> ps = parts;
    return custom(std::move(out), ng, [ps](Graph& g, const Matrix& go) {
      Eigen::Index r = 0;
      for (Var p : ps) {
        g.accum(p, go.middleRows(r, g.rows(p)));
        r += g.rows(p);
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw dim_error("concat_cols: empty");
    Eigen::Index R = rows(parts[0]), C = 0;
    bool ng = false;
    for (Var p : parts) {
      if (rows(p) != R) throw dim_error("concat_cols: row mismatch");
      C += cols(p);
      ng = ng || needs_grad(p);
    }
    Matrix out(R, C);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, cols(p)) = val(p);
      c += cols(p);
    }
    std::vector<Var> ps = parts;
    return custom(std::move(out), ng, [ps](Graph& g, const Matrix& go) {
      Eigen::Index c = 0;
      for (Var p : ps) {
        g.accum(p, go.middleCols(c, g.cols(p)));
        c += g.cols(p);
      }
    });
  }

  Var slice_rows(Var a, Eigen::Index r0, Eigen::Index nr) {
    if (r0 < 0 || r0 + nr > rows(a)) throw dim_error("slice_rows: range");
    return custom(val(a).middleRows(r0, nr), needs_grad(a),
                  [a, r0, nr](Graph& g, const Matrix& go) {
                    Matrix da = Matrix::Zero(g.rows(a), g.cols(a));
                    da.middleRows(r0, nr) = go;
                    g.accum(a, da);
                  });
  }

  Var slice_cols(Var a, Eigen::Index c0, Eigen::Index nc) {
    if (c0 < 0 || c0 + nc > cols(a)) throw dim_error("slice_cols: range");
    return custom(val(a).middleCols(c0, nc), needs_grad(a),
                  [a, c0, nc](Graph& g, const Matrix& go) {
                    Matrix da = Matrix::Zero(g.rows(a), g.cols(a));
                    da.middleCols(c0, nc) = go;
                    g.accum(a, da);
                  });
  }

  Var gather_rows(Var a, std::vector<int> idx) {
    const Matrix& A = val(a);
    Matrix out(Eigen::Index(idx.size()), A.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= A.rows()) throw dim_error("gather_rows: index");
      out.row(Eigen::Index(i)) = A.row(idx[i]);
    }
    return custom(std::move(out), needs_grad(a),
                  [a, idx](Graph& g, const Matrix& go) {
                    Matrix da = Matrix::Zero(g.rows(a), g.cols(a));
                    for (size_t i = 0; i < idx.size(); ++i)
                      da.row(idx[i]) += go.row(Eigen::Index(i));
                    g.accum(a, da);
                  });
  }

  Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

  // ---- backward -------------------------------------------------------------

  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    if (val(loss).size() != 1) throw dim_error("backward: loss must be 1x1");
    if (!ln.needs_grad) return;
    if (ln.grad.size() == 0) ln.grad = Matrix::Zero(1, 1);
    ln.grad(0, 0) += 1.0;
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.back || n.grad.size() == 0) continue;
      n.back(*this, n.grad);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ext = nullptr;
    Matrix grad;
    Matrix* ext_grad = nullptr;
    bool needs_grad = false;
    BackFn back;
  };

  int check(Var v) const {
    if (v.id < 0 || size_t(v.id) >= nodes_.size()) throw dim_error("invalid Var");
    return v.id;
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (rows(a) != rows(b) || cols(a) != cols(b))
      throw dim_error(std::string(op) + ": shape mismatch");
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  void set_back(Var v, BackFn f) {
    if (nodes_[check(v)].needs_grad) nodes_[v.id].back = std::move(f);
  }

  std::vector<Node> nodes_;
};

// ---- parameter initialization ------------------------------------------------

/// Uniform(-a, a) with a = 1/sqrt(fan_in), drawn from a seeded generator.
inline Matrix uniform_init(Eigen::Index r, Eigen::Index c, Eigen::Index fan_in,
                           std::mt19937_64& rng) {
  double a = 1.0 / std::sqrt(double(fan_in));
  std::uniform_real_distribution<double> d(-a, a);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = d(rng);
  return m;
}

inline Matrix normal_init(Eigen::Index r, Eigen::Index c, double stddev,
                          std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = d(rng);
  return m;
}

}  // namespace trap::ad
