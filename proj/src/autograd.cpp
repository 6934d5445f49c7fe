#include "aai/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "aai/error.hpp"
#include "eigen_map.hpp"

namespace aai::ad {

using detail::mat;

Tensor& Node::grad_buffer() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) {
        grad = Tensor(value.shape(), 0.0);
    }
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
    if (node_->grad.size() == node_->value.size() && node_->grad.shape() == node_->value.shape()) {
        return node_->grad;
    }
    return Tensor(node_->value.shape(), 0.0);
}

Var make_result(Tensor value, std::vector<Var> inputs,
                const std::function<std::function<void()>(Node* self)>& make_backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (node->requires_grad) {
        for (auto& v : inputs) {
            if (v.defined()) {
                node->inputs.push_back(v.node());
            }
        }
        node->backward = make_backward(node.get());
    }
    return Var(std::move(node));
}

void backward(const Var& root) {
    require(root.defined() && root.value().size() == 1, "backward() needs a scalar root");
    if (!root.requires_grad()) {
        return;
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        n->grad = Tensor(n->value.shape(), 0.0);
    }
    root.get()->grad.fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) {
            (*it)->backward();
        }
    }
}

namespace {

void accumulate(Node* n, const double* g, double factor = 1.0) {
    if (!n->requires_grad) {
        return;
    }
    Tensor& buf = n->grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] += factor * g[i];
    }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
}

void require_rank(const Var& a, int rank, const char* op) {
    require(a.value().ndim() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                          shape_str(a.shape()));
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b.value()[i];
    }
    Node* na = a.get();
    Node* nb = b.get();
    return make_result(std::move(out), {a, b}, [na, nb](Node* self) {
        return [na, nb, self] {
            accumulate(na, self->grad.data());
            accumulate(nb, self->grad.data());
        };
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b.value()[i];
    }
    Node* na = a.get();
    Node* nb = b.get();
    return make_result(std::move(out), {a, b}, [na, nb](Node* self) {
        return [na, nb, self] {
            accumulate(na, self->grad.data());
            accumulate(nb, self->grad.data(), -1.0);
        };
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    Node* na = a.get();
    Node* nb = b.get();
    return make_result(std::move(out), {a, b}, [na, nb](Node* self) {
        return [na, nb, self] {
            const std::size_t n = self->value.size();
            if (na->requires_grad) {
                Tensor& ga = na->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += self->grad[i] * nb->value[i];
                }
            }
            if (nb->requires_grad) {
                Tensor& gb = nb->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    gb[i] += self->grad[i] * na->value[i];
                }
            }
        };
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v *= s;
    }
    Node* na = a.get();
    return make_result(std::move(out), {a}, [na, s](Node* self) {
        return [na, s, self] { accumulate(na, self->grad.data(), s); };
    });
}

Var sum(const Var& a) {
    double total = 0.0;
    for (double v : a.value().values()) {
        total += v;
    }
    Node* na = a.get();
    return make_result(Tensor::scalar(total), {a}, [na](Node* self) {
        return [na, self] {
            const double g = self->grad[0];
            Tensor& ga = na->grad_buffer();
            for (auto& v : ga.values()) {
                v += g;
            }
        };
    });
}

Var mean(const Var& a) {
    require(a.value().size() > 0, "mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    Node* na = a.get();
    return make_result(std::move(out), {a}, [na](Node* self) {
        return [na, self] { accumulate(na, self->grad.data()); };
    });
}

Var silu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v = v / (1.0 + std::exp(-v));
    }
    Node* na = a.get();
    return make_result(std::move(out), {a}, [na](Node* self) {
        return [na, self] {
            Tensor& ga = na->grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double x = na->value[i];
                const double s = 1.0 / (1.0 + std::exp(-x));
                ga[i] += self->grad[i] * s * (1.0 + x * (1.0 - s));
            }
        };
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    require(a.shape()[1] == b.shape()[0], "matmul: inner dimension mismatch");
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out(Shape{m, n});
    mat(out).noalias() = mat(a.value()) * mat(b.value());
    Node* na = a.get();
    Node* nb = b.get();
    return make_result(std::move(out), {a, b}, [na, nb, m, k, n](Node* self) {
        return [na, nb, self, m, k, n] {
            auto g = mat(self->grad.data(), m, n);
            if (na->requires_grad) {
                mat(na->grad_buffer().data(), m, k).noalias() += g * mat(nb->value).transpose();
            }
            if (nb->requires_grad) {
                mat(nb->grad_buffer().data(), k, n).noalias() += mat(na->value).transpose() * g;
            }
        };
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    require(a.shape()[1] == b.shape()[1], "matmul_nt: inner dimension mismatch");
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    Tensor out(Shape{m, n});
    mat(out).noalias() = mat(a.value()) * mat(b.value()).transpose();
    Node* na = a.get();
    Node* nb = b.get();
    return make_result(std::move(out), {a, b}, [na, nb, m, k, n](Node* self) {
        return [na, nb, self, m, k, n] {
            auto g = mat(self->grad.data(), m, n);
            if (na->requires_grad) {
                mat(na->grad_buffer().data(), m, k).noalias() += g * mat(nb->value);
            }
            if (nb->requires_grad) {
                mat(nb->grad_buffer().data(), n, k).noalias() += g.transpose() * mat(na->value);
            }
        };
    });
}

Var transpose(const Var& a) {
    require_rank(a, 2, "transpose");
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m});
    mat(out) = mat(a.value()).transpose();
    Node* na = a.get();
    return make_result(std::move(out), {a}, [na, m, n](Node* self) {
        return [na, self, m, n] { mat(na->grad_buffer().data(), m, n) += mat(self->grad.data(), n, m).transpose(); };
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    require(x.shape()[1] == w.shape()[1], "linear: input width " + std::to_string(x.shape()[1]) +
                                              " does not match weight " + shape_str(w.shape()));
    const int batch = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
    Tensor out(Shape{batch, out_dim});
    mat(out).noalias() = mat(x.value()) * mat(w.value()).transpose();
    const bool has_bias = bias.defined();
    if (has_bias) {
        require(bias.value().size() == static_cast<std::size_t>(out_dim), "linear: bias size mismatch");
        for (int b = 0; b < batch; ++b) {
            for (int o = 0; o < out_dim; ++o) {
                out.at(b, o) += bias.value()[o];
            }
        }
    }
    Node* nx = x.get();
    Node* nw = w.get();
    Node* nb = has_bias ? bias.get() : nullptr;
    return make_result(std::move(out), {x, w, bias}, [=](Node* self) {
        return [=] {
            auto g = mat(self->grad.data(), batch, out_dim);
            if (nx->requires_grad) {
                mat(nx->grad_buffer().data(), batch, in).noalias() += g * mat(nw->value);
            }
            if (nw->requires_grad) {
                mat(nw->grad_buffer().data(), out_dim, in).noalias() += g.transpose() * mat(nx->value);
            }
            if (nb && nb->requires_grad) {
                Tensor& gb = nb->grad_buffer();
                for (int b = 0; b < batch; ++b) {
                    for (int o = 0; o < out_dim; ++o) {
                        gb[o] += self->grad.at(b, o);
                    }
                }
            }
        };
    });
}

namespace {

struct ConvGeometry {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
    int col_rows() const { return channels * kernel * kernel; }
    int col_cols() const { return out_h * out_w; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
    const int ncols = g.col_cols();
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.kernel; ++ki) {
            for (int kj = 0; kj < g.kernel; ++kj) {
                double* row = cols + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * ncols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
                        row[oy * g.out_w + ox] = inside ? x[(c * g.height + iy) * g.width + ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
    const int ncols = g.col_cols();
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.kernel; ++ki) {
            for (int kj = 0; kj < g.kernel; ++kj) {
                const double* row = cols + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * ncols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.height) {
                        continue;
                    }
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.width) {
                            dx[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d");
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    require(ws[1] == xs[1], "conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                                std::to_string(xs[1]));
    require(ws[2] == ws[3], "conv2d: kernel must be square");
    require(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
    const int batch = xs[0], out_ch = ws[0];
    ConvGeometry g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
    g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
    g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;
    require(g.out_h > 0 && g.out_w > 0, "conv2d: empty output");
    require(bias.value().size() == static_cast<std::size_t>(out_ch), "conv2d: bias size mismatch");

    const int crows = g.col_rows(), ccols = g.col_cols();
    const std::size_t col_size = static_cast<std::size_t>(crows) * ccols;
    const std::size_t in_size = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_size = static_cast<std::size_t>(out_ch) * ccols;
    const bool keep_cols = x.requires_grad() || w.requires_grad() || bias.requires_grad();
    auto cols = std::make_shared<std::vector<double>>(keep_cols ? col_size * batch : col_size);

    Tensor out(Shape{batch, out_ch, g.out_h, g.out_w});
    auto wm = mat(w.value().data(), out_ch, crows);
    for (int b = 0; b < batch; ++b) {
        double* cb = cols->data() + (keep_cols ? col_size * b : 0);
        im2col(x.value().data() + in_size * b, g, cb);
        auto om = mat(out.data() + out_size * b, out_ch, ccols);
        om.noalias() = wm * mat(static_cast<const double*>(cb), crows, ccols);
        for (int o = 0; o < out_ch; ++o) {
            om.row(o).array() += bias.value()[o];
        }
    }

    Node* nx = x.get();
    Node* nw = w.get();
    Node* nb = bias.get();
    return make_result(std::move(out), {x, w, bias}, [=](Node* self) {
        return [=] {
            auto wmat = mat(nw->value.data(), out_ch, crows);
            std::vector<double> dcols(nx->requires_grad ? col_size : 0);
            for (int b = 0; b < batch; ++b) {
                auto gm = mat(self->grad.data() + out_size * b, out_ch, ccols);
                const double* cb = cols->data() + col_size * b;
                if (nw->requires_grad) {
                    mat(nw->grad_buffer().data(), out_ch, crows).noalias() +=
                        gm * mat(cb, crows, ccols).transpose();
                }
                if (nb->requires_grad) {
                    Tensor& gb = nb->grad_buffer();
                    for (int o = 0; o < out_ch; ++o) {
                        gb[o] += gm.row(o).sum();
                    }
                }
                if (nx->requires_grad) {
                    mat(dcols.data(), crows, ccols).noalias() = wmat.transpose() * gm;
                    col2im_add(dcols.data(), g, nx->grad_buffer().data() + in_size * b);
                }
            }
        };
    });
}

Var add_channel_bias(const Var& x, const Var& cb) {
    require_rank(x, 4, "add_channel_bias");
    require_rank(cb, 2, "add_channel_bias");
    const int batch = x.shape()[0], ch = x.shape()[1];
    require(cb.shape()[0] == batch && cb.shape()[1] == ch, "add_channel_bias: offsets must be [B×C]");
    const int plane = x.shape()[2] * x.shape()[3];
    Tensor out = x.value();
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < ch; ++c) {
            const double v = cb.value().at(b, c);
            double* p = out.data() + static_cast<std::size_t>(b * ch + c) * plane;
            for (int i = 0; i < plane; ++i) {
                p[i] += v;
            }
        }
    }
    Node* nx = x.get();
    Node* nc = cb.get();
    return make_result(std::move(out), {x, cb}, [=](Node* self) {
        return [=] {
            accumulate(nx, self->grad.data());
            if (nc->requires_grad) {
                Tensor& gc = nc->grad_buffer();
                for (int b = 0; b < batch; ++b) {
                    for (int c = 0; c < ch; ++c) {
                        const double* p = self->grad.data() + static_cast<std::size_t>(b * ch + c) * plane;
                        double s = 0.0;
                        for (int i = 0; i < plane; ++i) {
                            s += p[i];
                        }
                        gc.at(b, c) += s;
                    }
                }
            }
        };
    });
}

Var upsample_nearest2x(const Var& x) {
    require_rank(x, 4, "upsample_nearest2x");
    const int bc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    Tensor out(Shape{x.shape()[0], x.shape()[1], 2 * h, 2 * w});
    for (int p = 0; p < bc; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
        for (int i = 0; i < 2 * h; ++i) {
            for (int j = 0; j < 2 * w; ++j) {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Node* nx = x.get();
    return make_result(std::move(out), {x}, [=](Node* self) {
        return [=] {
            Tensor& gx = nx->grad_buffer();
            for (int p = 0; p < bc; ++p) {
                const double* src = self->grad.data() + static_cast<std::size_t>(p) * 4 * h * w;
                double* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
                for (int i = 0; i < 2 * h; ++i) {
                    for (int j = 0; j < 2 * w; ++j) {
                        dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                    }
                }
            }
        };
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    require(as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3], "concat_channels: incompatible shapes");
    const int batch = as[0];
    const std::size_t na_sz = static_cast<std::size_t>(as[1]) * as[2] * as[3];
    const std::size_t nb_sz = static_cast<std::size_t>(bs[1]) * bs[2] * bs[3];
    Tensor out(Shape{batch, as[1] + bs[1], as[2], as[3]});
    for (int i = 0; i < batch; ++i) {
        std::copy_n(a.value().data() + na_sz * i, na_sz, out.data() + (na_sz + nb_sz) * i);
        std::copy_n(b.value().data() + nb_sz * i, nb_sz, out.data() + (na_sz + nb_sz) * i + na_sz);
    }
    Node* pa = a.get();
    Node* pb = b.get();
    return make_result(std::move(out), {a, b}, [=](Node* self) {
        return [=] {
            for (int i = 0; i < batch; ++i) {
                const double* g = self->grad.data() + (na_sz + nb_sz) * i;
                if (pa->requires_grad) {
                    double* ga = pa->grad_buffer().data() + na_sz * i;
                    for (std::size_t k = 0; k < na_sz; ++k) {
                        ga[k] += g[k];
                    }
                }
                if (pb->requires_grad) {
                    double* gb = pb->grad_buffer().data() + nb_sz * i;
                    for (std::size_t k = 0; k < nb_sz; ++k) {
                        gb[k] += g[na_sz + k];
                    }
                }
            }
        };
    });
}

Var l2_normalize_rows(const Var& x) {
    require_rank(x, 2, "l2_normalize_rows");
    const int rows = x.shape()[0], cols = x.shape()[1];
    Tensor out = x.value();
    std::vector<double> norms(rows);
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < cols; ++c) {
            s += out.at(r, c) * out.at(r, c);
        }
        norms[r] = std::sqrt(s);
        require(norms[r] > 0.0 && std::isfinite(norms[r]), "cannot normalize a zero or non-finite vector");
        for (int c = 0; c < cols; ++c) {
            out.at(r, c) /= norms[r];
        }
    }
    Node* nx = x.get();
    return make_result(std::move(out), {x}, [=](Node* self) {
        return [=] {
            Tensor& gx = nx->grad_buffer();
            for (int r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) {
                    dot += self->value.at(r, c) * self->grad.at(r, c);
                }
                for (int c = 0; c < cols; ++c) {
                    gx.at(r, c) += (self->grad.at(r, c) - self->value.at(r, c) * dot) / norms[r];
                }
            }
        };
    });
}

Var cross_entropy_diag(const Var& logits, bool exclude_positive) {
    require_rank(logits, 2, "cross_entropy_diag");
    const int n = logits.shape()[0];
    require(logits.shape()[1] == n, "cross_entropy_diag: logits must be square");
    require(n >= 2, "contrastive loss needs at least 2 pairs (no negatives otherwise)");
    const Tensor& s = logits.value();
    // probs holds the softmax over the denominator set of each row.
    auto probs = std::make_shared<Tensor>(Shape{n, n}, 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (int j = 0; j < n; ++j) {
            if (!(exclude_positive && j == i)) {
                mx = std::max(mx, s.at(i, j));
            }
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            if (!(exclude_positive && j == i)) {
                const double e = std::exp(s.at(i, j) - mx);
                probs->at(i, j) = e;
                z += e;
            }
        }
        for (int j = 0; j < n; ++j) {
            probs->at(i, j) /= z;
        }
        total += (mx + std::log(z)) - s.at(i, i);
    }
    Node* nl = logits.get();
    return make_result(Tensor::scalar(total / n), {logits}, [=](Node* self) {
        return [=] {
            const double g = self->grad[0] / n;
            Tensor& gl = nl->grad_buffer();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    gl.at(i, j) += g * (probs->at(i, j) - (i == j ? 1.0 : 0.0));
                }
            }
        };
    });
}

Var kl_rows_from_logits(const Tensor& q, const Var& logits) {
    require_rank(logits, 2, "kl_rows_from_logits");
    require(q.shape() == logits.shape(), "kl_rows_from_logits: target shape mismatch");
    const int rows = q.dim(0), cols = q.dim(1);
    const Tensor& s = logits.value();
    auto probs = std::make_shared<Tensor>(Shape{rows, cols}, 0.0);
    double total = 0.0;
    for (int i = 0; i < rows; ++i) {
        double mx = -INFINITY;
        for (int j = 0; j < cols; ++j) {
            mx = std::max(mx, s.at(i, j));
        }
        double z = 0.0;
        for (int j = 0; j < cols; ++j) {
            z += std::exp(s.at(i, j) - mx);
        }
        const double lse = mx + std::log(z);
        for (int j = 0; j < cols; ++j) {
            probs->at(i, j) = std::exp(s.at(i, j) - lse);
            const double qij = q.at(i, j);
            if (qij > 0.0) {
                total += qij * (std::log(qij) - (s.at(i, j) - lse));
            }
        }
    }
    Tensor qc = q;
    Node* nl = logits.get();
    return make_result(Tensor::scalar(total / rows), {logits}, [=](Node* self) {
        return [=] {
            const double g = self->grad[0] / rows;
            Tensor& gl = nl->grad_buffer();
            for (int i = 0; i < rows; ++i) {
                double qsum = 0.0;
                for (int j = 0; j < cols; ++j) {
                    qsum += qc.at(i, j);
                }
                for (int j = 0; j < cols; ++j) {
                    gl.at(i, j) += g * (probs->at(i, j) * qsum - qc.at(i, j));
                }
            }
        };
    });
}

Var mse(const Var& pred, const Tensor& target) {
    require(pred.shape() == target.shape(), "mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                                shape_str(target.shape()));
    const std::size_t n = target.size();
    require(n > 0, "mse of empty tensor");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.value()[i] - target[i];
        total += d * d;
    }
    Tensor tc = target;
    Node* np = pred.get();
    return make_result(Tensor::scalar(total / static_cast<double>(n)), {pred}, [=](Node* self) {
        return [=] {
            const double g = self->grad[0] * 2.0 / static_cast<double>(n);
            Tensor& gp = np->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                gp[i] += g * (np->value[i] - tc[i]);
            }
        };
    });
}

}  // namespace aai::ad
