#include "cprompt/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cprompt::kernel {

namespace {

void add_into(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

// Copies columns [c0, c0 + width) of a [rows x cols] matrix into a dense block.
Tensor column_block(const Tensor& x, std::size_t c0, std::size_t width) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  Tensor out = Tensor::matrix(rows, width);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data() + r * cols + c0, width, out.data() + r * width);
  return out;
}

// Transposed copy of a column block: result is [width x rows].
Tensor column_block_t(const Tensor& x, std::size_t c0, std::size_t width) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  Tensor out = Tensor::matrix(width, rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out.data()[j * rows + r] = x.data()[r * cols + c0 + j];
  return out;
}

void add_column_block(Tensor& dst, const Tensor& block, std::size_t c0) {
  const std::size_t rows = dst.rows();
  const std::size_t cols = dst.cols();
  const std::size_t width = block.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    float* d = dst.data() + r * cols + c0;
    const float* s = block.data() + r * width;
    for (std::size_t j = 0; j < width; ++j) d[j] += s[j];
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

NodeId Graph::record(std::string op, std::vector<NodeId> inputs, ForwardFn forward,
                     BackwardFn backward) {
  for (NodeId in : inputs) check(in);
  Node node;
  node.op = std::move(op);
  node.inputs = std::move(inputs);
  node.value = forward(*this, node.saved);
  node.forward = std::move(forward);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Graph::check(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw ContractError("graph: node " + std::to_string(id.index) + " does not exist");
  }
}

NodeId Graph::leaf(Tensor value) {
  Node node;
  node.op = "leaf";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::leaf_ref(const Tensor& value) {
  Node node;
  node.op = "leaf";
  node.borrowed = &value;
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value(NodeId id) const {
  check(id);
  const Node& n = nodes_[id.index];
  return n.borrowed ? *n.borrowed : n.value;
}

bool Graph::is_leaf(NodeId id) const {
  check(id);
  return !nodes_[id.index].forward;
}

const std::string& Graph::op_name(NodeId id) const {
  check(id);
  return nodes_[id.index].op;
}

std::span<const NodeId> Graph::inputs(NodeId id) const {
  check(id);
  return nodes_[id.index].inputs;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  return record(
      "matmul", {a, b},
      [a, b](const Graph& g, std::vector<Tensor>&) {
        return kernel::matmul(g.value(a), g.value(b));
      },
      [a, b](const Graph& g, const std::vector<Tensor>&, const Tensor& gout,
             std::span<Tensor* const> gin) {
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        if (gin[0]) {
          const Tensor bt = transpose(bv);
          gemm_accumulate(gout.data(), bt.data(), gin[0]->data(), gout.rows(), gout.cols(),
                          bt.cols());
        }
        if (gin[1]) {
          const Tensor at = transpose(av);
          gemm_accumulate(at.data(), gout.data(), gin[1]->data(), at.rows(), at.cols(),
                          gout.cols());
        }
      });
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
  return record(
      "matmul_nt", {a, b},
      [a, b](const Graph& g, std::vector<Tensor>&) {
        return kernel::matmul_nt(g.value(a), g.value(b));
      },
      [a, b](const Graph& g, const std::vector<Tensor>&, const Tensor& gout,
             std::span<Tensor* const> gin) {
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        // y = a b^T: dA = dY b, dB = dY^T a
        if (gin[0]) {
          gemm_accumulate(gout.data(), bv.data(), gin[0]->data(), gout.rows(), gout.cols(),
                          bv.cols());
        }
        if (gin[1]) {
          const Tensor gt = transpose(gout);
          gemm_accumulate(gt.data(), av.data(), gin[1]->data(), gt.rows(), gt.cols(), av.cols());
        }
      });
}

NodeId Graph::add(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "add");
  return record(
      "add", {a, b},
      [a, b](const Graph& g, std::vector<Tensor>&) {
        Tensor out = g.value(a);
        add_into(out, g.value(b));
        return out;
      },
      [](const Graph&, const std::vector<Tensor>&, const Tensor& gout,
         std::span<Tensor* const> gin) {
        if (gin[0]) add_into(*gin[0], gout);
        if (gin[1]) add_into(*gin[1], gout);
      });
}

NodeId Graph::scale(NodeId a, float factor) {
  return record(
      "scale", {a},
      [a, factor](const Graph& g, std::vector<Tensor>&) {
        Tensor out = g.value(a);
        for (float& v : out.values()) v *= factor;
        return out;
      },
      [factor](const Graph&, const std::vector<Tensor>&, const Tensor& gout,
               std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < gout.numel(); ++i) (*gin[0])[i] += gout[i] * factor;
      });
}

NodeId Graph::sum(NodeId a) {
  return record(
      "sum", {a},
      [a](const Graph& g, std::vector<Tensor>&) {
        float s = 0.0f;
        for (float v : g.value(a).values()) s += v;
        return Tensor::scalar(s);
      },
      [](const Graph&, const std::vector<Tensor>&, const Tensor& gout,
         std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (float& v : gin[0]->values()) v += gout[0];
      });
}

NodeId Graph::row_softmax(NodeId x) {
  return record(
      "row_softmax", {x},
      [x](const Graph& g, std::vector<Tensor>&) { return kernel::row_softmax(g.value(x)); },
      [this_id = static_cast<std::uint32_t>(nodes_.size())](
          const Graph& g, const std::vector<Tensor>&, const Tensor& gout,
          std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& y = g.value(NodeId{this_id});
        const std::size_t n = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          const float* yr = y.data() + r * n;
          const float* gr = gout.data() + r * n;
          float dot = 0.0f;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
          float* out = gin[0]->data() + r * n;
          for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - dot);
        }
      });
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias, float eps) {
  return record(
      "layer_norm", {x, gain, bias},
      [x, gain, bias, eps](const Graph& g, std::vector<Tensor>& saved) {
        LayerNormStats stats;
        Tensor out = kernel::layer_norm(g.value(x), g.value(gain), g.value(bias), eps, &stats);
        saved.clear();
        saved.emplace_back(Shape{stats.mean.size()}, std::move(stats.mean));
        saved.emplace_back(Shape{stats.rstd.size()}, std::move(stats.rstd));
        return out;
      },
      [x, gain](const Graph& g, const std::vector<Tensor>& saved, const Tensor& gout,
                std::span<Tensor* const> gin) {
        const Tensor& xv = g.value(x);
        const Tensor& gv = g.value(gain);
        const Tensor& mean = saved[0];
        const Tensor& rstd = saved[1];
        const std::size_t d = xv.cols();
        const float inv_d = 1.0f / static_cast<float>(d);
        std::vector<float> xhat(d);
        std::vector<float> dxhat(d);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const float* xr = xv.data() + r * d;
          const float* gr = gout.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) xhat[j] = (xr[j] - mean[r]) * rstd[r];
          if (gin[1]) {
            for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += gr[j] * xhat[j];
          }
          if (gin[2]) {
            for (std::size_t j = 0; j < d; ++j) (*gin[2])[j] += gr[j];
          }
          if (gin[0]) {
            float mean_dxhat = 0.0f;
            float mean_dxhat_xhat = 0.0f;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = gr[j] * gv[j];
              mean_dxhat += dxhat[j];
              mean_dxhat_xhat += dxhat[j] * xhat[j];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            float* out = gin[0]->data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              out[j] += rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

NodeId Graph::gelu(NodeId x) {
  return record(
      "gelu", {x}, [x](const Graph& g, std::vector<Tensor>&) { return kernel::gelu(g.value(x)); },
      [x](const Graph& g, const std::vector<Tensor>&, const Tensor& gout,
          std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& xv = g.value(x);
        for (std::size_t i = 0; i < xv.numel(); ++i) (*gin[0])[i] += gout[i] * gelu_grad(xv[i]);
      });
}

NodeId Graph::causal_attention(NodeId q, NodeId k, NodeId v, std::size_t n_heads) {
  const Tensor& qv = value(q);
  require_same_shape(qv, value(k), "causal_attention");
  require_same_shape(qv, value(v), "causal_attention");
  if (n_heads == 0 || qv.cols() % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(qv.cols()) +
                     " not divisible into " + std::to_string(n_heads) + " heads");
  }
  return record(
      "causal_attention", {q, k, v},
      [q, k, v, n_heads](const Graph& g, std::vector<Tensor>& saved) {
        const Tensor& qv = g.value(q);
        const Tensor& kv = g.value(k);
        const Tensor& vv = g.value(v);
        const std::size_t t = qv.rows();
        const std::size_t d = qv.cols();
        const std::size_t dh = d / n_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        Tensor out = Tensor::matrix(t, d);
        saved.clear();
        for (std::size_t h = 0; h < n_heads; ++h) {
          const Tensor qh = column_block(qv, h * dh, dh);
          const Tensor kt = column_block_t(kv, h * dh, dh);
          const Tensor vh = column_block(vv, h * dh, dh);
          Tensor p = kernel::matmul(qh, kt);
          for (std::size_t i = 0; i < t; ++i) {
            float* row = p.data() + i * t;
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
              row[j] *= scale;
              mx = std::max(mx, row[j]);
            }
            float s = 0.0f;
            for (std::size_t j = 0; j <= i; ++j) {
              row[j] = std::exp(row[j] - mx);
              s += row[j];
            }
            const float inv = 1.0f / s;
            for (std::size_t j = 0; j <= i; ++j) row[j] *= inv;
            for (std::size_t j = i + 1; j < t; ++j) row[j] = 0.0f;
          }
          add_column_block(out, kernel::matmul(p, vh), h * dh);
          saved.push_back(std::move(p));
        }
        return out;
      },
      [q, k, v, n_heads](const Graph& g, const std::vector<Tensor>& saved, const Tensor& gout,
                         std::span<Tensor* const> gin) {
        const Tensor& qv = g.value(q);
        const Tensor& kv = g.value(k);
        const Tensor& vv = g.value(v);
        const std::size_t t = qv.rows();
        const std::size_t d = qv.cols();
        const std::size_t dh = d / n_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        for (std::size_t h = 0; h < n_heads; ++h) {
          const Tensor& p = saved[h];
          const Tensor go = column_block(gout, h * dh, dh);
          if (gin[2]) {
            add_column_block(*gin[2], kernel::matmul_tn(p, go), h * dh);
          }
          if (!gin[0] && !gin[1]) continue;
          // dP = dO V^T, then the softmax Jacobian restricted to the causal band.
          Tensor ds = kernel::matmul(go, column_block_t(vv, h * dh, dh));
          for (std::size_t i = 0; i < t; ++i) {
            const float* pr = p.data() + i * t;
            float* dr = ds.data() + i * t;
            float dot = 0.0f;
            for (std::size_t j = 0; j <= i; ++j) dot += dr[j] * pr[j];
            for (std::size_t j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - dot) * scale;
            for (std::size_t j = i + 1; j < t; ++j) dr[j] = 0.0f;
          }
          if (gin[0]) {
            add_column_block(*gin[0], kernel::matmul(ds, column_block(kv, h * dh, dh)), h * dh);
          }
          if (gin[1]) {
            add_column_block(*gin[1], kernel::matmul_tn(ds, column_block(qv, h * dh, dh)),
                             h * dh);
          }
        }
      });
}

NodeId Graph::gather_rows(NodeId table, std::span<const std::int32_t> ids) {
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  const std::size_t rows = value(table).rows();
  for (auto id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
  }
  return record(
      "gather_rows", {table},
      [table, idx](const Graph& g, std::vector<Tensor>&) {
        const Tensor& tv = g.value(table);
        const std::size_t d = tv.cols();
        Tensor out = Tensor::matrix(idx.size(), d);
        for (std::size_t t = 0; t < idx.size(); ++t)
          std::copy_n(tv.data() + static_cast<std::size_t>(idx[t]) * d, d, out.data() + t * d);
        return out;
      },
      [idx](const Graph&, const std::vector<Tensor>&, const Tensor& gout,
            std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const std::size_t d = gout.cols();
        for (std::size_t t = 0; t < idx.size(); ++t) {
          float* dst = gin[0]->data() + static_cast<std::size_t>(idx[t]) * d;
          const float* src = gout.data() + t * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
}

NodeId Graph::concat_rows(NodeId top, NodeId bottom) {
  const Tensor& a = value(top);
  const Tensor& b = value(bottom);
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("concat_rows: widths differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  return record(
      "concat_rows", {top, bottom},
      [top, bottom](const Graph& g, std::vector<Tensor>&) {
        const Tensor& a = g.value(top);
        const Tensor& b = g.value(bottom);
        Tensor out(Shape{a.shape()[0] + b.shape()[0], a.shape()[1]});
        std::copy(a.values().begin(), a.values().end(), out.data());
        std::copy(b.values().begin(), b.values().end(), out.data() + a.numel());
        return out;
      },
      [top](const Graph& g, const std::vector<Tensor>&, const Tensor& gout,
            std::span<Tensor* const> gin) {
        const std::size_t split = g.value(top).numel();
        if (gin[0]) {
          for (std::size_t i = 0; i < split; ++i) (*gin[0])[i] += gout[i];
        }
        if (gin[1]) {
          for (std::size_t i = split; i < gout.numel(); ++i) (*gin[1])[i - split] += gout[i];
        }
      });
}

NodeId Graph::slice_rows(NodeId x, std::size_t begin, std::size_t end) {
  const Tensor& xv = value(x);
  if (begin > end || end > xv.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(xv.rows()) + " rows");
  }
  return record(
      "slice_rows", {x},
      [x, begin, end](const Graph& g, std::vector<Tensor>&) {
        const Tensor& xv = g.value(x);
        const std::size_t d = xv.cols();
        Tensor out(Shape{end - begin, d});
        std::copy_n(xv.data() + begin * d, (end - begin) * d, out.data());
        return out;
      },
      [begin](const Graph&, const std::vector<Tensor>&, const Tensor& gout,
              std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const std::size_t d = gout.cols();
        float* dst = gin[0]->data() + begin * d;
        for (std::size_t i = 0; i < gout.numel(); ++i) dst[i] += gout[i];
      });
}

NodeId Graph::nll(NodeId logits, std::span<const std::int32_t> targets) {
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return record(
      "nll", {logits},
      [logits, tgt](const Graph& g, std::vector<Tensor>&) {
        return Tensor::scalar(static_cast<float>(nll_next_token(g.value(logits), tgt)));
      },
      [logits, tgt](const Graph& g, const std::vector<Tensor>&, const Tensor& gout,
                    std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& lv = g.value(logits);
        const Tensor probs = kernel::row_softmax(lv);
        const float coeff = gout[0] / static_cast<float>(lv.rows());
        const std::size_t v = lv.cols();
        for (std::size_t t = 0; t < lv.rows(); ++t) {
          float* dst = gin[0]->data() + t * v;
          const float* pr = probs.data() + t * v;
          for (std::size_t j = 0; j < v; ++j) dst[j] += coeff * pr[j];
          dst[static_cast<std::size_t>(tgt[t])] -= coeff;
        }
      });
}

NodeId Graph::mean(std::span<const NodeId> scalars) {
  if (scalars.empty()) throw ContractError("mean: no inputs");
  for (NodeId s : scalars) {
    if (value(s).numel() != 1) throw ShapeError("mean: inputs must be scalars");
  }
  std::vector<NodeId> ins(scalars.begin(), scalars.end());
  const float n = static_cast<float>(ins.size());
  return record(
      "mean", ins,
      [ins, n](const Graph& g, std::vector<Tensor>&) {
        float s = 0.0f;
        for (NodeId id : ins) s += g.value(id)[0];
        return Tensor::scalar(s / n);
      },
      [n](const Graph&, const std::vector<Tensor>&, const Tensor& gout,
          std::span<Tensor* const> gin) {
        for (Tensor* t : gin)
          if (t) (*t)[0] += gout[0] / n;
      });
}

GradientMap Graph::backward(NodeId root, std::span<const NodeId> wanted) const {
  check(root);
  if (value(root).numel() != 1) {
    throw ContractError("backward: root node " + std::to_string(root.index) + " is not a scalar (" +
                        shape_string(value(root).shape()) + ")");
  }
  std::vector<char> is_wanted(nodes_.size(), 0);
  for (NodeId w : wanted) {
    check(w);
    if (!is_leaf(w)) {
      throw ContractError("backward: requested node " + std::to_string(w.index) +
                          " is not a leaf");
    }
    is_wanted[w.index] = 1;
  }

  const std::size_t end = root.index + 1;
  std::vector<char> needs(end, 0);
  for (std::size_t i = 0; i < end; ++i) {
    if (is_wanted[i]) {
      needs[i] = 1;
      continue;
    }
    for (NodeId in : nodes_[i].inputs) {
      if (needs[in.index]) {
        needs[i] = 1;
        break;
      }
    }
  }

  std::vector<Tensor> grads(end);
  grads[root.index] = Tensor(value(root).shape(), std::vector<float>(1, 1.0f));
  std::vector<Tensor*> gin;
  for (std::size_t i = end; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!needs[i] || grads[i].shape().empty() || !node.backward) continue;
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const std::uint32_t in = node.inputs[j].index;
      if (!needs[in]) continue;
      if (grads[in].shape().empty()) grads[in] = Tensor(value(node.inputs[j]).shape());
      gin[j] = &grads[in];
    }
    node.backward(*this, node.saved, grads[i], gin);
    if (!is_wanted[i]) grads[i] = Tensor();
  }

  GradientMap out;
  for (NodeId w : wanted) {
    if (w.index < end && !grads[w.index].shape().empty()) {
      out[w.index] = grads[w.index];
    } else {
      out[w.index] = Tensor(value(w).shape());
    }
  }
  return out;
}

bool Graph::replay_matches() const {
  for (const Node& node : nodes_) {
    if (!node.forward) continue;
    std::vector<Tensor> saved;
    if (!(node.forward(*this, saved) == node.value)) return false;
  }
  return true;
}

}  // namespace cprompt::kernel
