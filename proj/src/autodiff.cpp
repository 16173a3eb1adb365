#include "transllm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace transllm::ad {

namespace {

thread_local int g_no_grad_depth = 0;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const Var& p : parents) rg = rg || p.requires_grad();
  if (rg && g_no_grad_depth == 0) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const Var& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(bp);
  }
  return Var(n);
}

Tensor& gbuf(const NodeRef& n) { return n->grad_buffer(); }

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(n);
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(n);
}

void backward(const Var& loss) {
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss does not require gradients");
  }
  if (loss.value().size() != 1) {
    throw std::logic_error("backward: loss must be scalar");
  }

  // Post-order DFS; reverse gives a topological order (sink first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.raw(), 0});
  visited.insert(loss.raw());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

void zero_grad(const std::vector<Var>& params) {
  for (const Var& p : params) {
    Tensor& g = p.node()->grad_buffer();
    std::fill(g.vec().begin(), g.vec().end(), 0.0);
  }
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_shape(a.value().same_shape(b.value()), "add " + a.value().shape_str() + " vs " + b.value().shape_str());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int s = 0; s < 2; ++s) {
      if (!n.parents[s]->requires_grad) continue;
      Tensor& g = gbuf(n.parents[s]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_shape(a.value().same_shape(b.value()), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_shape(a.value().same_shape(b.value()), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_shape(a.value().same_shape(b.value()), "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& x : out.vec()) x *= c;
  return make_node(std::move(out), {a}, [c](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.vec()) x = x > 0.0 ? x : 0.0;
  return make_node(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > 0.0) g[i] += n.grad[i];
  });
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out = a.value();
  for (double& x : out.vec()) x = x > 0.0 ? x : slope * x;
  return make_node(std::move(out), {a}, [slope](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (av[i] > 0.0 ? 1.0 : slope);
  });
}

Var abs(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.vec()) x = std::fabs(x);
  return make_node(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = gbuf(n.parents[0]);
    // subgradient 0 at ties
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += n.grad[i] * (av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0));
  });
}

Var log(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.vec()) x = std::log(x);
  return make_node(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / av[i];
  });
}

Var clamp_max(const Var& a, double cap) {
  Tensor out = a.value();
  for (double& x : out.vec()) x = x < cap ? x : cap;
  return make_node(std::move(out), {a}, [cap](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] < cap) g[i] += n.grad[i];
  });
}

Var mul_const(const Var& a, const Tensor& m) {
  check_shape(a.value().same_shape(m), "mul_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return make_node(std::move(out), {a}, [m](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * m[i];
  });
}

Var add_const(const Var& a, const Tensor& c) {
  check_shape(a.value().same_shape(c), "add_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  check_shape(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
              "matmul " + A.shape_str() + " * " + B.shape_str());
  const std::size_t m = A.dim(0), k = A.dim(1), p = B.dim(1);
  Tensor out({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A.data() + i * k;
    double* orow = out.data() + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = B.data() + kk * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return make_node(std::move(out), {a, b}, [m, k, p](Node& n) {
    const Tensor& A = n.parents[0]->value;
    const Tensor& B = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& gA = gbuf(n.parents[0]);  // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          const double* grow = n.grad.data() + i * p;
          const double* brow = B.data() + kk * p;
          for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
          gA[i * k + kk] += acc;
        }
    }
    if (n.parents[1]->requires_grad) {
      Tensor& gB = gbuf(n.parents[1]);  // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = A.data() + i * k;
        const double* grow = n.grad.data() + i * p;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = arow[kk];
          if (av == 0.0) continue;
          double* gbrow = gB.data() + kk * p;
          for (std::size_t j = 0; j < p; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Var transpose(const Var& a) {
  const Tensor& A = a.value();
  check_shape(A.rank() == 2, "transpose");
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = A(i, j);
  return make_node(std::move(out), {a}, [r, c](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

Var add_row_vector(const Var& x, const Var& bias) {
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  check_shape(X.rank() == 2 && B.size() == X.dim(1), "add_row_vector");
  Tensor out = X;
  const std::size_t r = X.dim(0), c = X.dim(1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += B[j];
  return make_node(std::move(out), {x, bias}, [r, c](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
    }
  });
}

Var add_slice_broadcast(const Var& x, const Var& m) {
  const Tensor& X = x.value();
  const Tensor& M = m.value();
  check_shape(X.rank() == 3 && M.rank() == 2 && X.dim(1) == M.dim(0) && X.dim(2) == M.dim(1),
              "add_slice_broadcast");
  Tensor out = X;
  const std::size_t a = X.dim(0), sz = M.size();
  for (std::size_t t = 0; t < a; ++t)
    for (std::size_t i = 0; i < sz; ++i) out[t * sz + i] += M[i];
  return make_node(std::move(out), {x, m}, [a, sz](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t t = 0; t < a; ++t)
        for (std::size_t i = 0; i < sz; ++i) g[i] += n.grad[t * sz + i];
    }
  });
}

// ---- shape -------------------------------------------------------------------

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  check_shape(n == a.value().size(), "reshape");
  Tensor out(std::move(shape));
  out.vec() = a.value().vec();
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  check_shape(A.rank() == 2 && B.rank() == 2 && A.dim(0) == B.dim(0), "concat_cols");
  const std::size_t r = A.dim(0), ca = A.dim(1), cb = B.dim(1);
  Tensor out({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out(i, j) = A(i, j);
    for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = B(i, j);
  }
  return make_node(std::move(out), {a, b}, [r, ca, cb](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += n.grad[i * (ca + cb) + j];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += n.grad[i * (ca + cb) + ca + j];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  std::size_t cols = parts[0].value().rank() == 1 ? parts[0].value().size() : parts[0].value().dim(1);
  std::size_t rows = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    const std::size_t pc = t.rank() == 1 ? t.size() : t.dim(1);
    check_shape(pc == cols, "concat_rows column mismatch");
    rows += t.rank() == 1 ? 1 : t.dim(0);
  }
  Tensor out({rows, cols});
  std::size_t r = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    std::copy(t.vec().begin(), t.vec().end(), out.data() + r * cols);
    r += t.size() / cols;
  }
  return make_node(std::move(out), parts, [cols](Node& n) {
    std::size_t r = 0;
    for (auto& par : n.parents) {
      const std::size_t pr = par->value.size() / cols;
      if (par->requires_grad) {
        Tensor& g = gbuf(par);
        for (std::size_t i = 0; i < pr * cols; ++i) g[i] += n.grad[r * cols + i];
      }
      r += pr;
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  check_shape(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0) && A.dim(1) == B.dim(1),
              "concat_channels");
  const std::size_t t = A.dim(0), nn = A.dim(1), ca = A.dim(2), cb = B.dim(2);
  Tensor out({t, nn, ca + cb});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < nn; ++j) {
      for (std::size_t k = 0; k < ca; ++k) out(i, j, k) = A(i, j, k);
      for (std::size_t k = 0; k < cb; ++k) out(i, j, ca + k) = B(i, j, k);
    }
  return make_node(std::move(out), {a, b}, [t, nn, ca, cb](Node& n) {
    const std::size_t cc = ca + cb;
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < nn; ++j)
          for (std::size_t k = 0; k < ca; ++k)
            g[(i * nn + j) * ca + k] += n.grad[(i * nn + j) * cc + k];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < nn; ++j)
          for (std::size_t k = 0; k < cb; ++k)
            g[(i * nn + j) * cb + k] += n.grad[(i * nn + j) * cc + ca + k];
    }
  });
}

Var row(const Var& a, std::size_t i) {
  const Tensor& A = a.value();
  check_shape(A.rank() == 2 && i < A.dim(0), "row");
  const std::size_t c = A.dim(1);
  Tensor out({c});
  std::copy(A.data() + i * c, A.data() + (i + 1) * c, out.data());
  return make_node(std::move(out), {a}, [i, c](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j];
  });
}

Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
  const Tensor& A = a.value();
  check_shape(A.rank() == 2 && r0 <= r1 && r1 <= A.dim(0), "slice_rows");
  const std::size_t c = A.dim(1);
  Tensor out({r1 - r0, c});
  std::copy(A.data() + r0 * c, A.data() + r1 * c, out.data());
  return make_node(std::move(out), {a}, [r0, r1, c](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < (r1 - r0) * c; ++i) g[r0 * c + i] += n.grad[i];
  });
}

Var slice_node(const Var& x, std::size_t node) {
  const Tensor& X = x.value();
  check_shape(X.rank() == 3 && node < X.dim(1), "slice_node");
  const std::size_t t = X.dim(0), nn = X.dim(1), c = X.dim(2);
  Tensor out({t, c});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t k = 0; k < c; ++k) out(i, k) = X(i, node, k);
  return make_node(std::move(out), {x}, [t, nn, c, node](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t k = 0; k < c; ++k) g[(i * nn + node) * c + k] += n.grad[i * c + k];
  });
}

// ---- reductions ---------------------------------------------------------------

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double x : a.value().vec()) s += x;
  return make_node(Tensor::scalar(s), {a}, [](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

Var mean_all(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  double s = 0.0;
  for (double x : a.value().vec()) s += x;
  return make_node(Tensor::scalar(s * inv), {a}, [inv](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv;
  });
}

Var dot(const Var& a, const Var& b) {
  check_shape(a.value().size() == b.value().size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  return make_node(Tensor::scalar(s), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * av[i];
    }
  });
}

// ---- nonlinear blocks ----------------------------------------------------------

Var softmax(const Var& a) {
  const Tensor& A = a.value();
  Tensor out = A;
  double mx = A[0];
  for (double x : A.vec()) mx = std::max(mx, x);
  double z = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    out[i] = std::exp(A[i] - mx);
    z += out[i];
  }
  for (double& x : out.vec()) x /= z;
  const Tensor probs = out;
  return make_node(std::move(out), {a}, [probs](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    double inner = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) inner += probs[i] * n.grad[i];
    for (std::size_t i = 0; i < probs.size(); ++i) g[i] += probs[i] * (n.grad[i] - inner);
  });
}

namespace {

// Shared row-softmax backward with a 0/1 validity mask baked into the output
// (invalid entries have output 0 and receive no gradient).
void softmax_rows_backward(Node& n, const Tensor& probs) {
  Tensor& g = gbuf(n.parents[0]);
  const std::size_t r = probs.dim(0), c = probs.dim(1);
  for (std::size_t i = 0; i < r; ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < c; ++j) inner += probs(i, j) * n.grad[i * c + j];
    for (std::size_t j = 0; j < c; ++j) {
      const double p = probs(i, j);
      if (p != 0.0) g[i * c + j] += p * (n.grad[i * c + j] - inner);
    }
  }
}

}  // namespace

Var causal_softmax_rows(const Var& scores) {
  const Tensor& S = scores.value();
  check_shape(S.rank() == 2 && S.dim(0) == S.dim(1), "causal_softmax_rows");
  const std::size_t n = S.dim(0);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = S(i, 0);
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, S(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      out(i, j) = std::exp(S(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) out(i, j) /= z;
  }
  const Tensor probs = out;
  return make_node(std::move(out), {scores},
                   [probs](Node& n) { softmax_rows_backward(n, probs); });
}

Var masked_softmax_rows(const Var& scores, const Tensor& mask) {
  const Tensor& S = scores.value();
  check_shape(S.rank() == 2 && S.same_shape(mask), "masked_softmax_rows");
  const std::size_t r = S.dim(0), c = S.dim(1);
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -1e300;
    bool any = false;
    for (std::size_t j = 0; j < c; ++j)
      if (mask(i, j) != 0.0) {
        mx = std::max(mx, S(i, j));
        any = true;
      }
    if (!any) throw std::invalid_argument("masked_softmax_rows: empty row " + std::to_string(i));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask(i, j) != 0.0) {
        out(i, j) = std::exp(S(i, j) - mx);
        z += out(i, j);
      }
    for (std::size_t j = 0; j < c; ++j)
      if (mask(i, j) != 0.0) out(i, j) /= z;
  }
  const Tensor probs = out;
  return make_node(std::move(out), {scores},
                   [probs](Node& n) { softmax_rows_backward(n, probs); });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& X = x.value();
  check_shape(X.rank() == 2 && gamma.value().size() == X.dim(1) && beta.value().size() == X.dim(1),
              "layer_norm_rows");
  const std::size_t r = X.dim(0), c = X.dim(1);
  Tensor out({r, c});
  Tensor xhat({r, c});
  Tensor inv_std({r});
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += X(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = X(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (X(i, j) - mean) * inv;
      out(i, j) = xhat(i, j) * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [xhat, inv_std, r, c](Node& n) {
    const Tensor& gam = n.parents[1]->value;
    if (n.parents[1]->requires_grad) {
      Tensor& gg = gbuf(n.parents[1]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gg[j] += n.grad[i * c + j] * xhat(i, j);
    }
    if (n.parents[2]->requires_grad) {
      Tensor& gb = gbuf(n.parents[2]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += n.grad[i * c + j];
    }
    if (n.parents[0]->requires_grad) {
      Tensor& gx = gbuf(n.parents[0]);
      for (std::size_t i = 0; i < r; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = n.grad[i * c + j] * gam[j];
          m1 += dxh;
          m2 += dxh * xhat(i, j);
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = n.grad[i * c + j] * gam[j];
          gx[i * c + j] += inv_std[i] * (dxh - m1 - xhat(i, j) * m2);
        }
      }
    }
  });
}

Var cumsum(const Var& a) {
  const Tensor& A = a.value();
  Tensor out = A;
  double acc = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    acc += A[i];
    out[i] = acc;
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    // reverse cumulative sum of the incoming gradient
    double acc = 0.0;
    for (std::size_t i = g.size(); i-- > 0;) {
      acc += n.grad[i];
      g[i] += acc;
    }
  });
}

// ---- sequence / table -----------------------------------------------------------

Var embedding_rows(const Var& table, const std::vector<int>& ids) {
  const Tensor& T = table.value();
  check_shape(T.rank() == 2, "embedding_rows");
  const std::size_t d = T.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t s = 0; s < ids.size(); ++s) {
    const std::size_t id = static_cast<std::size_t>(ids[s]);
    check_shape(id < T.dim(0), "embedding id out of range");
    std::copy(T.data() + id * d, T.data() + (id + 1) * d, out.data() + s * d);
  }
  return make_node(std::move(out), {table}, [ids, d](Node& n) {
    Tensor& g = gbuf(n.parents[0]);
    for (std::size_t s = 0; s < ids.size(); ++s) {
      double* dst = g.data() + static_cast<std::size_t>(ids[s]) * d;
      const double* src = n.grad.data() + s * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var cross_entropy_positions(const Var& logits, const std::vector<int>& targets) {
  const Tensor& L = logits.value();
  check_shape(L.rank() == 2 && targets.size() == L.dim(0), "cross_entropy_positions");
  const std::size_t s = L.dim(0), v = L.dim(1);
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    if (targets[i] < 0) continue;
    ++count;
    double mx = L(i, 0);
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, L(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(L(i, j) - mx);
    total += std::log(z) + mx - L(i, static_cast<std::size_t>(targets[i]));
  }
  if (count == 0) throw std::invalid_argument("cross_entropy_positions: no target positions");
  const double inv = 1.0 / static_cast<double>(count);
  return make_node(Tensor::scalar(total * inv), {logits}, [targets, s, v, inv](Node& n) {
    const Tensor& L = n.parents[0]->value;
    Tensor& g = gbuf(n.parents[0]);
    const double up = n.grad[0] * inv;
    for (std::size_t i = 0; i < s; ++i) {
      if (targets[i] < 0) continue;
      double mx = L(i, 0);
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, L(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(L(i, j) - mx);
      for (std::size_t j = 0; j < v; ++j) {
        const double p = std::exp(L(i, j) - mx) / z;
        g[i * v + j] += up * (p - (static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0));
      }
    }
  });
}

Var conv1d_causal(const Var& x, const Var& w, const Var& b, std::size_t dilation) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& B = b.value();
  check_shape(X.rank() == 3 && W.rank() == 3 && X.dim(2) == W.dim(1) && B.size() == W.dim(2),
              "conv1d_causal " + X.shape_str() + " w " + W.shape_str());
  const std::size_t t = X.dim(0), nn = X.dim(1), cin = X.dim(2);
  const std::size_t kernel = W.dim(0), cout = W.dim(2);
  Tensor out({t, nn, cout});
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ni = 0; ni < nn; ++ni) {
      double* orow = out.data() + (ti * nn + ni) * cout;
      for (std::size_t co = 0; co < cout; ++co) orow[co] = B[co];
      for (std::size_t k = 0; k < kernel; ++k) {
        // tap k reads input at ti - (kernel-1-k)*dilation
        const std::size_t back = (kernel - 1 - k) * dilation;
        if (back > ti) continue;
        const double* xrow = X.data() + ((ti - back) * nn + ni) * cin;
        const double* wmat = W.data() + k * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double xv = xrow[ci];
          if (xv == 0.0) continue;
          const double* wrow = wmat + ci * cout;
          for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * wrow[co];
        }
      }
    }
  return make_node(std::move(out), {x, w, b}, [t, nn, cin, kernel, cout, dilation](Node& n) {
    const Tensor& X = n.parents[0]->value;
    const Tensor& W = n.parents[1]->value;
    const bool gx_needed = n.parents[0]->requires_grad;
    const bool gw_needed = n.parents[1]->requires_grad;
    const bool gb_needed = n.parents[2]->requires_grad;
    Tensor* gx = gx_needed ? &gbuf(n.parents[0]) : nullptr;
    Tensor* gw = gw_needed ? &gbuf(n.parents[1]) : nullptr;
    Tensor* gb = gb_needed ? &gbuf(n.parents[2]) : nullptr;
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ni = 0; ni < nn; ++ni) {
        const double* grow = n.grad.data() + (ti * nn + ni) * cout;
        if (gb_needed)
          for (std::size_t co = 0; co < cout; ++co) (*gb)[co] += grow[co];
        for (std::size_t k = 0; k < kernel; ++k) {
          const std::size_t back = (kernel - 1 - k) * dilation;
          if (back > ti) continue;
          const std::size_t xoff = ((ti - back) * nn + ni) * cin;
          const double* wmat = W.data() + k * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = X[xoff + ci];
            double acc = 0.0;
            const double* wrow = wmat + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) {
              acc += wrow[co] * grow[co];
              if (gw_needed) (*gw)[(k * cin + ci) * cout + co] += xv * grow[co];
            }
            if (gx_needed) (*gx)[xoff + ci] += acc;
          }
        }
      }
  });
}

Var time_project(const Var& x, const Var& w) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  check_shape(X.rank() == 3 && W.rank() == 2 && W.dim(0) == X.dim(0), "time_project");
  const std::size_t k = X.dim(0), nn = X.dim(1), c = X.dim(2), t = W.dim(1);
  Tensor out({t, nn, c});
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ki = 0; ki < k; ++ki) {
      const double wv = W(ki, ti);
      if (wv == 0.0) continue;
      const double* src = X.data() + ki * nn * c;
      double* dst = out.data() + ti * nn * c;
      for (std::size_t i = 0; i < nn * c; ++i) dst[i] += wv * src[i];
    }
  return make_node(std::move(out), {x, w}, [k, nn, c, t](Node& n) {
    const Tensor& X = n.parents[0]->value;
    const Tensor& W = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& gx = gbuf(n.parents[0]);
      for (std::size_t ti = 0; ti < t; ++ti)
        for (std::size_t ki = 0; ki < k; ++ki) {
          const double wv = W(ki, ti);
          if (wv == 0.0) continue;
          const double* grow = n.grad.data() + ti * nn * c;
          double* dst = gx.data() + ki * nn * c;
          for (std::size_t i = 0; i < nn * c; ++i) dst[i] += wv * grow[i];
        }
    }
    if (n.parents[1]->requires_grad) {
      Tensor& gw = gbuf(n.parents[1]);
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t ti = 0; ti < t; ++ti) {
          const double* src = X.data() + ki * nn * c;
          const double* grow = n.grad.data() + ti * nn * c;
          double acc = 0.0;
          for (std::size_t i = 0; i < nn * c; ++i) acc += src[i] * grow[i];
          gw[ki * t + ti] += acc;
        }
    }
  });
}

Var graph_attention(const Var& h, const Tensor& adj, const std::vector<GatHeadParams>& heads,
                    double leaky_slope) {
  const Tensor& H = h.value();
  check_shape(H.rank() == 2, "graph_attention input");
  const std::size_t nn = H.dim(0), c = H.dim(1);
  check_shape(adj.rank() == 2 && adj.dim(0) == nn && adj.dim(1) == nn, "graph_attention adjacency");
  if (heads.empty()) throw std::invalid_argument("graph_attention: no heads");
  const std::size_t dh = heads[0].w.value().dim(1);

  struct HeadTrace {
    Tensor wh;     // N x dh
    Tensor alpha;  // N x N (0 outside mask)
    Tensor pre;    // N x N raw scores s_i + t_j (valid where alpha mask)
  };
  auto traces = std::make_shared<std::vector<HeadTrace>>(heads.size());

  Tensor out({nn, heads.size() * dh});
  for (std::size_t hd = 0; hd < heads.size(); ++hd) {
    const Tensor& W = heads[hd].w.value();
    check_shape(W.dim(0) == c && W.dim(1) == dh, "graph_attention head weight");
    HeadTrace& tr = (*traces)[hd];
    tr.wh = Tensor({nn, dh});
    for (std::size_t i = 0; i < nn; ++i)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double xv = H(i, ci);
        if (xv == 0.0) continue;
        for (std::size_t j = 0; j < dh; ++j) tr.wh(i, j) += xv * W(ci, j);
      }
    std::vector<double> s(nn, 0.0), t(nn, 0.0);
    const Tensor& asrc = heads[hd].a_src.value();
    const Tensor& adst = heads[hd].a_dst.value();
    for (std::size_t i = 0; i < nn; ++i)
      for (std::size_t j = 0; j < dh; ++j) {
        s[i] += tr.wh(i, j) * asrc[j];
        t[i] += tr.wh(i, j) * adst[j];
      }
    tr.pre = Tensor({nn, nn});
    tr.alpha = Tensor({nn, nn});
    for (std::size_t i = 0; i < nn; ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < nn; ++j) {
        if (i != j && adj(i, j) == 0.0) continue;
        tr.pre(i, j) = s[i] + t[j];
        const double e = tr.pre(i, j) > 0.0 ? tr.pre(i, j) : leaky_slope * tr.pre(i, j);
        mx = std::max(mx, e);
        tr.alpha(i, j) = e;  // store activated score temporarily
      }
      double z = 0.0;
      for (std::size_t j = 0; j < nn; ++j) {
        if (i != j && adj(i, j) == 0.0) continue;
        tr.alpha(i, j) = std::exp(tr.alpha(i, j) - mx);
        z += tr.alpha(i, j);
      }
      for (std::size_t j = 0; j < nn; ++j) {
        if (i != j && adj(i, j) == 0.0) continue;
        tr.alpha(i, j) /= z;
      }
    }
    for (std::size_t i = 0; i < nn; ++i)
      for (std::size_t j = 0; j < nn; ++j) {
        const double a = tr.alpha(i, j);
        if (a == 0.0) continue;
        for (std::size_t k = 0; k < dh; ++k) out(i, hd * dh + k) += a * tr.wh(j, k);
      }
  }

  std::vector<Var> parents{h};
  for (const auto& hp : heads) {
    parents.push_back(hp.w);
    parents.push_back(hp.a_src);
    parents.push_back(hp.a_dst);
  }
  const std::size_t n_heads = heads.size();
  return make_node(std::move(out), std::move(parents),
                   [traces, adj, nn, c, dh, n_heads, leaky_slope](Node& n) {
    const Tensor& H = n.parents[0]->value;
    const bool gh_needed = n.parents[0]->requires_grad;
    Tensor* gh = gh_needed ? &gbuf(n.parents[0]) : nullptr;
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      const HeadTrace& tr = (*traces)[hd];
      const Tensor& W = n.parents[1 + 3 * hd]->value;
      const Tensor& asrc = n.parents[2 + 3 * hd]->value;
      const Tensor& adst = n.parents[3 + 3 * hd]->value;

      // dout for this head: N x dh view of n.grad columns [hd*dh, (hd+1)*dh)
      Tensor dwh({nn, dh});  // gradient into wh
      Tensor dalpha({nn, nn});
      for (std::size_t i = 0; i < nn; ++i)
        for (std::size_t j = 0; j < nn; ++j) {
          if (tr.alpha(i, j) == 0.0 && i != j) continue;
          double acc = 0.0;
          for (std::size_t k = 0; k < dh; ++k)
            acc += n.grad[i * (n_heads * dh) + hd * dh + k] * tr.wh(j, k);
          dalpha(i, j) = acc;
        }
      // out = alpha * wh contribution to dwh
      for (std::size_t j = 0; j < nn; ++j)
        for (std::size_t i = 0; i < nn; ++i) {
          const double a = tr.alpha(i, j);
          if (a == 0.0) continue;
          for (std::size_t k = 0; k < dh; ++k)
            dwh(j, k) += a * n.grad[i * (n_heads * dh) + hd * dh + k];
        }
      // softmax + leaky backward -> ds, dt
      std::vector<double> ds(nn, 0.0), dt(nn, 0.0);
      for (std::size_t i = 0; i < nn; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < nn; ++j)
          if (tr.alpha(i, j) != 0.0) inner += tr.alpha(i, j) * dalpha(i, j);
        for (std::size_t j = 0; j < nn; ++j) {
          const double a = tr.alpha(i, j);
          if (a == 0.0) continue;
          const double de = a * (dalpha(i, j) - inner);
          const double dpre = de * (tr.pre(i, j) > 0.0 ? 1.0 : leaky_slope);
          ds[i] += dpre;
          dt[j] += dpre;
        }
      }
      // s = wh * a_src, t = wh * a_dst
      Node& wnode = *n.parents[1 + 3 * hd];
      Node& srcnode = *n.parents[2 + 3 * hd];
      Node& dstnode = *n.parents[3 + 3 * hd];
      if (srcnode.requires_grad) {
        Tensor& g = srcnode.grad_buffer();
        for (std::size_t i = 0; i < nn; ++i)
          for (std::size_t k = 0; k < dh; ++k) g[k] += tr.wh(i, k) * ds[i];
      }
      if (dstnode.requires_grad) {
        Tensor& g = dstnode.grad_buffer();
        for (std::size_t i = 0; i < nn; ++i)
          for (std::size_t k = 0; k < dh; ++k) g[k] += tr.wh(i, k) * dt[i];
      }
      for (std::size_t i = 0; i < nn; ++i)
        for (std::size_t k = 0; k < dh; ++k)
          dwh(i, k) += ds[i] * asrc[k] + dt[i] * adst[k];
      // wh = H * W
      if (wnode.requires_grad) {
        Tensor& g = wnode.grad_buffer();
        for (std::size_t i = 0; i < nn; ++i)
          for (std::size_t ci = 0; ci < c; ++ci) {
            const double xv = H(i, ci);
            if (xv == 0.0) continue;
            for (std::size_t k = 0; k < dh; ++k) g[ci * dh + k] += xv * dwh(i, k);
          }
      }
      if (gh_needed) {
        for (std::size_t i = 0; i < nn; ++i)
          for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            for (std::size_t k = 0; k < dh; ++k) acc += dwh(i, k) * W(ci, k);
            (*gh)[i * c + ci] += acc;
          }
      }
    }
  });
}

}  // namespace transllm::ad
