#include "vaeunet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace vaeunet::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

Var make_result(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& v : inputs) {
            any = any || v.requires_grad();
        }
        if (any) {
            node->requires_grad = true;
            for (const auto& v : inputs) {
                node->parents.push_back(v.node());
            }
            node->backward = std::move(bw);
        }
    }
    return Var(std::move(node));
}

Var make_result_n(Tensor value, std::span<const Var> inputs, std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (const auto& v : inputs) {
                node->parents.push_back(v.node());
            }
            node->backward = std::move(bw);
        }
    }
    return Var(std::move(node));
}

// Gradient sink for parent i, or nullptr when that parent does not need one.
Tensor* sink(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

void im2col(const double* x, int channels, int h, int w, int k, double* cols) {
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::size_t row = 0;
    for (int c = 0; c < channels; ++c) {
        const double* xc = x + c * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++row) {
                double* out = cols + row * plane;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - pad;
                        out[y * w + xx] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? xc[sy * w + sx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, int channels, int h, int w, int k, double* dx) {
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::size_t row = 0;
    for (int c = 0; c < channels; ++c) {
        double* dc = dx + c * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++row) {
                const double* in = cols + row * plane;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) {
                        continue;
                    }
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - pad;
                        if (sx >= 0 && sx < w) {
                            dc[sy * w + sx] += in[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

struct AxisWeights {
    std::vector<int> lo;
    std::vector<int> hi;
    std::vector<double> frac;
};

AxisWeights bilinear_axis(int in, int out) {
    AxisWeights a;
    a.lo.resize(out);
    a.hi.resize(out);
    a.frac.resize(out);
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(src));
        a.lo[o] = i0;
        a.hi[o] = std::min(i0 + 1, in - 1);
        a.frac[o] = src - i0;
    }
    return a;
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty()) {
        grad = Tensor(value.shape(), 0.0);
    }
    return grad;
}

Var Var::constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var Var::leaf(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

Tensor Var::grad() const {
    if (node_->grad.empty()) {
        return Tensor(node_->value.shape(), 0.0);
    }
    return node_->grad;
}

void Var::zero_grad() { node_->grad = Tensor(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
    if (root.value().size() != 1) {
        throw ShapeError("backward: root must be a scalar, got " + root.shape().str());
    }
    if (!root.requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !visited.contains(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) {
            n->backward(*n);
        }
    }
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor out = a.value();
    out += b.value();
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < 2; ++i) {
            if (Tensor* g = sink(self, i)) {
                *g += self.grad;
            }
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.value()[i] * b.value()[i];
    }
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = parent_value(self, 0);
        const Tensor& bv = parent_value(self, 1);
        if (Tensor* g = sink(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * bv[i];
            }
        }
        if (Tensor* g = sink(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * av[i];
            }
        }
    });
}

Var scale(const Var& a, double factor) {
    Tensor out = a.value();
    for (double& v : out.values()) {
        v *= factor;
    }
    return make_result(std::move(out), {a}, [factor](Node& self) {
        if (Tensor* g = sink(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += factor * self.grad[i];
            }
        }
    });
}

Var divide(const Var& a, double divisor) {
    Tensor out = a.value();
    for (double& v : out.values()) {
        v /= divisor;
    }
    return make_result(std::move(out), {a}, [divisor](Node& self) {
        if (Tensor* g = sink(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] / divisor;
            }
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values()) {
        v = v > 0.0 ? v : 0.0;
    }
    return make_result(std::move(out), {x}, [](Node& self) {
        const Tensor& xv = parent_value(self, 0);
        if (Tensor* g = sink(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (xv[i] > 0.0) {
                    (*g)[i] += self.grad[i];
                }
            }
        }
    });
}

Var clamp(const Var& x, double lo, double hi) {
    Tensor out = x.value();
    for (double& v : out.values()) {
        v = std::clamp(v, lo, hi);
    }
    return make_result(std::move(out), {x}, [lo, hi](Node& self) {
        const Tensor& xv = parent_value(self, 0);
        if (Tensor* g = sink(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (xv[i] >= lo && xv[i] <= hi) {
                    (*g)[i] += self.grad[i];
                }
            }
        }
    });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) {
        s += v;
    }
    return make_result(Tensor::scalar(s), {x}, [](Node& self) {
        if (Tensor* g = sink(self, 0)) {
            const double up = self.grad[0];
            for (double& v : g->values()) {
                v += up;
            }
        }
    });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    if (terms.size() != weights.size() || terms.empty()) {
        throw std::invalid_argument("weighted_sum: terms/weights length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        s += weights[i] * terms[i].item();
    }
    std::vector<double> w(weights.begin(), weights.end());
    return make_result_n(Tensor::scalar(s), terms, [w = std::move(w)](Node& self) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (Tensor* g = sink(self, i)) {
                (*g)[0] += w[i] * self.grad[0];
            }
        }
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    const int co = ws.n;
    const int ci = ws.c;
    const int k = ws.h;
    if (ws.h != ws.w || k % 2 != 1) {
        throw ShapeError("conv2d: kernel must be square and odd, got " + ws.str());
    }
    if (xs.c != ci) {
        throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                         std::to_string(ci));
    }
    if (bias.shape() != Shape{1, co, 1, 1}) {
        throw ShapeError("conv2d: bias shape " + bias.shape().str());
    }
    const int h = xs.h;
    const int w = xs.w;
    const int kk = ci * k * k;
    const int plane = h * w;
    Tensor out(Shape{xs.n, co, h, w});
    RowMat cols(kk, plane);
    ConstMapMat wm(weight.value().data(), co, kk);
    Eigen::Map<const Eigen::VectorXd> bv(bias.value().data(), co);
    for (int n = 0; n < xs.n; ++n) {
        const double* xn = x.value().data() + static_cast<std::size_t>(n) * ci * plane;
        MapMat on(out.data() + static_cast<std::size_t>(n) * co * plane, co, plane);
        if (k == 1) {
            on.noalias() = wm * ConstMapMat(xn, ci, plane);
        } else {
            im2col(xn, ci, h, w, k, cols.data());
            on.noalias() = wm * cols;
        }
        on.colwise() += bv;
    }
    return make_result(std::move(out), {x, weight, bias}, [ci, co, k, h, w, kk, plane](Node& self) {
        const Tensor& xv = parent_value(self, 0);
        const Tensor& wv = parent_value(self, 1);
        Tensor* gx = sink(self, 0);
        Tensor* gw = sink(self, 1);
        Tensor* gb = sink(self, 2);
        const int batch = xv.shape().n;
        ConstMapMat wm(wv.data(), co, kk);
        RowMat cols(kk, plane);
        RowMat dcols(kk, plane);
        for (int n = 0; n < batch; ++n) {
            const double* xn = xv.data() + static_cast<std::size_t>(n) * ci * plane;
            ConstMapMat dout(self.grad.data() + static_cast<std::size_t>(n) * co * plane, co, plane);
            if (gb != nullptr) {
                Eigen::Map<Eigen::VectorXd> db(gb->data(), co);
                db += dout.rowwise().sum();
            }
            if (gw != nullptr) {
                MapMat dw(gw->data(), co, kk);
                if (k == 1) {
                    dw.noalias() += dout * ConstMapMat(xn, ci, plane).transpose();
                } else {
                    im2col(xn, ci, h, w, k, cols.data());
                    dw.noalias() += dout * cols.transpose();
                }
            }
            if (gx != nullptr) {
                double* dx = gx->data() + static_cast<std::size_t>(n) * ci * plane;
                if (k == 1) {
                    MapMat(dx, ci, plane).noalias() += wm.transpose() * dout;
                } else {
                    dcols.noalias() = wm.transpose() * dout;
                    col2im(dcols.data(), ci, h, w, k, dx);
                }
            }
        }
    });
}

Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    const int ci = ws.n;
    const int co = ws.c;
    if (ws.h != 2 || ws.w != 2 || xs.c != ci) {
        throw ShapeError("conv_transpose2x2: input " + xs.str() + " weight " + ws.str());
    }
    if (bias.shape() != Shape{1, co, 1, 1}) {
        throw ShapeError("conv_transpose2x2: bias shape " + bias.shape().str());
    }
    const int h = xs.h;
    const int w = xs.w;
    const int plane = h * w;
    const int oh = 2 * h;
    const int ow = 2 * w;
    Tensor out(Shape{xs.n, co, oh, ow});
    ConstMapMat wm(weight.value().data(), ci, co * 4);
    RowMat y(co * 4, plane);
    for (int n = 0; n < xs.n; ++n) {
        ConstMapMat xn(x.value().data() + static_cast<std::size_t>(n) * ci * plane, ci, plane);
        y.noalias() = wm.transpose() * xn;
        for (int o = 0; o < co; ++o) {
            const double b = bias.value()[o];
            for (int a = 0; a < 2; ++a) {
                for (int bb = 0; bb < 2; ++bb) {
                    const double* row = y.data() + static_cast<std::size_t>(o * 4 + a * 2 + bb) * plane;
                    for (int i = 0; i < h; ++i) {
                        for (int j = 0; j < w; ++j) {
                            out.at(n, o, 2 * i + a, 2 * j + bb) = row[i * w + j] + b;
                        }
                    }
                }
            }
        }
    }
    return make_result(std::move(out), {x, weight, bias}, [ci, co, h, w, plane](Node& self) {
        const Tensor& xv = parent_value(self, 0);
        const Tensor& wv = parent_value(self, 1);
        Tensor* gx = sink(self, 0);
        Tensor* gw = sink(self, 1);
        Tensor* gb = sink(self, 2);
        ConstMapMat wm(wv.data(), ci, co * 4);
        RowMat dy(co * 4, plane);
        for (int n = 0; n < xv.shape().n; ++n) {
            for (int o = 0; o < co; ++o) {
                double bsum = 0.0;
                for (int a = 0; a < 2; ++a) {
                    for (int bb = 0; bb < 2; ++bb) {
                        double* row = dy.data() + static_cast<std::size_t>(o * 4 + a * 2 + bb) * plane;
                        for (int i = 0; i < h; ++i) {
                            for (int j = 0; j < w; ++j) {
                                const double g = self.grad.at(n, o, 2 * i + a, 2 * j + bb);
                                row[i * w + j] = g;
                                bsum += g;
                            }
                        }
                    }
                }
                if (gb != nullptr) {
                    (*gb)[o] += bsum;
                }
            }
            ConstMapMat xn(xv.data() + static_cast<std::size_t>(n) * ci * plane, ci, plane);
            if (gw != nullptr) {
                MapMat(gw->data(), ci, co * 4).noalias() += xn * dy.transpose();
            }
            if (gx != nullptr) {
                MapMat(gx->data() + static_cast<std::size_t>(n) * ci * plane, ci, plane).noalias() += wm * dy;
            }
        }
    });
}

Var max_pool2(const Var& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
        throw ShapeError("max_pool2: odd spatial size " + s.str());
    }
    Tensor out(Shape{s.n, s.c, s.h / 2, s.w / 2});
    std::vector<std::size_t> argmax(out.size());
    std::size_t oi = 0;
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int i = 0; i < s.h / 2; ++i) {
                for (int j = 0; j < s.w / 2; ++j, ++oi) {
                    std::size_t best = x.value().index(n, c, 2 * i, 2 * j);
                    for (int a = 0; a < 2; ++a) {
                        for (int b = 0; b < 2; ++b) {
                            const std::size_t idx = x.value().index(n, c, 2 * i + a, 2 * j + b);
                            if (x.value()[idx] > x.value()[best]) {
                                best = idx;
                            }
                        }
                    }
                    argmax[oi] = best;
                    out[oi] = x.value()[best];
                }
            }
        }
    }
    return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
        if (Tensor* g = sink(self, 0)) {
            for (std::size_t i = 0; i < argmax.size(); ++i) {
                (*g)[argmax[i]] += self.grad[i];
            }
        }
    });
}

Var avg_pool2(const Var& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
        throw ShapeError("avg_pool2: odd spatial size " + s.str());
    }
    Tensor out(Shape{s.n, s.c, s.h / 2, s.w / 2});
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int i = 0; i < s.h / 2; ++i) {
                for (int j = 0; j < s.w / 2; ++j) {
                    out.at(n, c, i, j) = 0.25 * (x.value().at(n, c, 2 * i, 2 * j) + x.value().at(n, c, 2 * i, 2 * j + 1) +
                                                 x.value().at(n, c, 2 * i + 1, 2 * j) +
                                                 x.value().at(n, c, 2 * i + 1, 2 * j + 1));
                }
            }
        }
    }
    return make_result(std::move(out), {x}, [](Node& self) {
        if (Tensor* g = sink(self, 0)) {
            const Shape os = self.value.shape();
            for (int n = 0; n < os.n; ++n) {
                for (int c = 0; c < os.c; ++c) {
                    for (int i = 0; i < os.h; ++i) {
                        for (int j = 0; j < os.w; ++j) {
                            const double up = 0.25 * self.grad.at(n, c, i, j);
                            g->at(n, c, 2 * i, 2 * j) += up;
                            g->at(n, c, 2 * i, 2 * j + 1) += up;
                            g->at(n, c, 2 * i + 1, 2 * j) += up;
                            g->at(n, c, 2 * i + 1, 2 * j + 1) += up;
                        }
                    }
                }
            }
        }
    });
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    const Shape s = x.shape();
    if (s.h == out_h && s.w == out_w) {
        return x;
    }
    const AxisWeights ay = bilinear_axis(s.h, out_h);
    const AxisWeights ax = bilinear_axis(s.w, out_w);
    Tensor out(Shape{s.n, s.c, out_h, out_w});
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int i = 0; i < out_h; ++i) {
                const double fy = ay.frac[i];
                for (int j = 0; j < out_w; ++j) {
                    const double fx = ax.frac[j];
                    const double top = (1 - fx) * x.at(n, c, ay.lo[i], ax.lo[j]) + fx * x.at(n, c, ay.lo[i], ax.hi[j]);
                    const double bot = (1 - fx) * x.at(n, c, ay.hi[i], ax.lo[j]) + fx * x.at(n, c, ay.hi[i], ax.hi[j]);
                    out.at(n, c, i, j) = (1 - fy) * top + fy * bot;
                }
            }
        }
    }
    return out;
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    const Shape s = x.shape();
    if (s.h == out_h && s.w == out_w) {
        return x;
    }
    Tensor out = bilinear_resize(x.value(), out_h, out_w);
    return make_result(std::move(out), {x}, [s, out_h, out_w](Node& self) {
        Tensor* g = sink(self, 0);
        if (g == nullptr) {
            return;
        }
        const AxisWeights ay = bilinear_axis(s.h, out_h);
        const AxisWeights ax = bilinear_axis(s.w, out_w);
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                for (int i = 0; i < out_h; ++i) {
                    const double fy = ay.frac[i];
                    for (int j = 0; j < out_w; ++j) {
                        const double fx = ax.frac[j];
                        const double up = self.grad.at(n, c, i, j);
                        g->at(n, c, ay.lo[i], ax.lo[j]) += (1 - fy) * (1 - fx) * up;
                        g->at(n, c, ay.lo[i], ax.hi[j]) += (1 - fy) * fx * up;
                        g->at(n, c, ay.hi[i], ax.lo[j]) += fy * (1 - fx) * up;
                        g->at(n, c, ay.hi[i], ax.hi[j]) += fy * fx * up;
                    }
                }
            }
        }
    });
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_channels: no inputs");
    }
    Shape s = parts.front().shape();
    int channels = 0;
    for (const auto& p : parts) {
        const Shape ps = p.shape();
        if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
            throw ShapeError("concat_channels: " + ps.str() + " incompatible with " + s.str());
        }
        channels += ps.c;
    }
    s.c = channels;
    Tensor out(s);
    const std::size_t plane = s.plane();
    std::vector<int> widths;
    for (int n = 0; n < s.n; ++n) {
        double* dst = out.data() + static_cast<std::size_t>(n) * s.c * plane;
        for (const auto& p : parts) {
            const std::size_t chunk = static_cast<std::size_t>(p.shape().c) * plane;
            const double* src = p.value().data() + n * chunk;
            std::copy(src, src + chunk, dst);
            dst += chunk;
        }
    }
    for (const auto& p : parts) {
        widths.push_back(p.shape().c);
    }
    return make_result_n(std::move(out), parts, [widths = std::move(widths)](Node& self) {
        const Shape os = self.value.shape();
        const std::size_t plane = os.plane();
        for (int n = 0; n < os.n; ++n) {
            const double* src = self.grad.data() + static_cast<std::size_t>(n) * os.c * plane;
            for (std::size_t i = 0; i < widths.size(); ++i) {
                const std::size_t chunk = static_cast<std::size_t>(widths[i]) * plane;
                if (Tensor* g = sink(self, i)) {
                    double* dst = g->data() + n * chunk;
                    for (std::size_t k = 0; k < chunk; ++k) {
                        dst[k] += src[k];
                    }
                }
                src += chunk;
            }
        }
    });
}

Var reparameterize(const Var& mean, const Var& log_var, const Tensor& noise) {
    require_same_shape(mean.shape(), log_var.shape(), "reparameterize mean/log_var");
    require_same_shape(mean.shape(), noise.shape(), "reparameterize noise");
    Tensor out(mean.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = mean.value()[i] + std::exp(0.5 * log_var.value()[i]) * noise[i];
    }
    return make_result(std::move(out), {mean, log_var}, [noise](Node& self) {
        if (Tensor* g = sink(self, 0)) {
            *g += self.grad;
        }
        if (Tensor* g = sink(self, 1)) {
            const Tensor& lv = parent_value(self, 1);
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * 0.5 * std::exp(0.5 * lv[i]) * noise[i];
            }
        }
    });
}

Var diag_gaussian_kl(const Var& q_mean, const Var& q_log_var, const Var& p_mean, const Var& p_log_var) {
    const Shape s = q_mean.shape();
    require_same_shape(s, q_log_var.shape(), "gaussian_kl q mean/log_var");
    require_same_shape(s, p_mean.shape(), "gaussian_kl q/p mean");
    require_same_shape(s, p_log_var.shape(), "gaussian_kl q/p log_var");
    const double positions = static_cast<double>(s.n) * s.h * s.w;
    double total = 0.0;
    for (std::size_t i = 0; i < s.numel(); ++i) {
        const double lq = q_log_var.value()[i];
        const double lp = p_log_var.value()[i];
        const double d = q_mean.value()[i] - p_mean.value()[i];
        total += 0.5 * (lp - lq) + (std::exp(lq) + d * d) / (2.0 * std::exp(lp)) - 0.5;
    }
    return make_result(Tensor::scalar(total / positions), {q_mean, q_log_var, p_mean, p_log_var},
                       [positions](Node& self) {
                           const double up = self.grad[0] / positions;
                           const Tensor& mq = parent_value(self, 0);
                           const Tensor& lq = parent_value(self, 1);
                           const Tensor& mp = parent_value(self, 2);
                           const Tensor& lp = parent_value(self, 3);
                           Tensor* gmq = sink(self, 0);
                           Tensor* glq = sink(self, 1);
                           Tensor* gmp = sink(self, 2);
                           Tensor* glp = sink(self, 3);
                           for (std::size_t i = 0; i < mq.size(); ++i) {
                               const double inv_vp = std::exp(-lp[i]);
                               const double d = mq[i] - mp[i];
                               if (gmq) (*gmq)[i] += up * d * inv_vp;
                               if (gmp) (*gmp)[i] -= up * d * inv_vp;
                               if (glq) (*glq)[i] += up * (0.5 * std::exp(lq[i]) * inv_vp - 0.5);
                               if (glp) (*glp)[i] += up * (0.5 - 0.5 * (std::exp(lq[i]) + d * d) * inv_vp);
                           }
                       });
}

Tensor softmax_channels(const Tensor& logits) {
    const Shape s = logits.shape();
    Tensor p(s);
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t k = 0; k < plane; ++k) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < s.c; ++c) {
                mx = std::max(mx, logits[(static_cast<std::size_t>(n) * s.c + c) * plane + k]);
            }
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) {
                const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * plane + k;
                p[idx] = std::exp(logits[idx] - mx);
                z += p[idx];
            }
            for (int c = 0; c < s.c; ++c) {
                p[(static_cast<std::size_t>(n) * s.c + c) * plane + k] /= z;
            }
        }
    }
    return p;
}

Var softmax_cross_entropy(const Var& logits, const Tensor& target) {
    const Shape s = logits.shape();
    require_same_shape(s, target.shape(), "cross_entropy logits/target");
    const std::size_t plane = s.plane();
    const double positions = static_cast<double>(s.n) * plane;
    double total = 0.0;
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t k = 0; k < plane; ++k) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < s.c; ++c) {
                mx = std::max(mx, logits.value()[(static_cast<std::size_t>(n) * s.c + c) * plane + k]);
            }
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) {
                z += std::exp(logits.value()[(static_cast<std::size_t>(n) * s.c + c) * plane + k] - mx);
            }
            const double lse = mx + std::log(z);
            for (int c = 0; c < s.c; ++c) {
                const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * plane + k;
                total -= target[idx] * (logits.value()[idx] - lse);
            }
        }
    }
    return make_result(Tensor::scalar(total / positions), {logits}, [target, positions](Node& self) {
        Tensor* g = sink(self, 0);
        if (g == nullptr) {
            return;
        }
        const Tensor p = softmax_channels(parent_value(self, 0));
        const Shape s = p.shape();
        const std::size_t plane = s.plane();
        const double up = self.grad[0] / positions;
        for (int n = 0; n < s.n; ++n) {
            for (std::size_t k = 0; k < plane; ++k) {
                double tsum = 0.0;
                for (int c = 0; c < s.c; ++c) {
                    tsum += target[(static_cast<std::size_t>(n) * s.c + c) * plane + k];
                }
                for (int c = 0; c < s.c; ++c) {
                    const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * plane + k;
                    (*g)[idx] += up * (p[idx] * tsum - target[idx]);
                }
            }
        }
    });
}

Var soft_dice_loss(const Var& logits, const Tensor& target, int first_class, double smooth) {
    const Shape s = logits.shape();
    require_same_shape(s, target.shape(), "dice logits/target");
    if (first_class < 0 || first_class >= s.c) {
        throw std::invalid_argument("soft_dice_loss: first_class " + std::to_string(first_class) +
                                    " outside [0, " + std::to_string(s.c) + ")");
    }
    const Tensor p = softmax_channels(logits.value());
    const std::size_t plane = s.plane();
    const int classes = s.c - first_class;
    std::vector<double> inter(s.c, 0.0);
    std::vector<double> denom(s.c, 0.0);
    for (int n = 0; n < s.n; ++n) {
        for (int c = first_class; c < s.c; ++c) {
            for (std::size_t k = 0; k < plane; ++k) {
                const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * plane + k;
                inter[c] += p[idx] * target[idx];
                denom[c] += p[idx] + target[idx];
            }
        }
    }
    double dice_sum = 0.0;
    for (int c = first_class; c < s.c; ++c) {
        dice_sum += (2.0 * inter[c] + smooth) / (denom[c] + smooth);
    }
    const double loss = 1.0 - dice_sum / classes;
    return make_result(Tensor::scalar(loss), {logits},
                       [target, first_class, smooth, classes, inter, denom, p](Node& self) {
                           Tensor* g = sink(self, 0);
                           if (g == nullptr) {
                               return;
                           }
                           const Shape s = p.shape();
                           const std::size_t plane = s.plane();
                           const double up = self.grad[0];
                           std::vector<double> dp(s.c);
                           for (int n = 0; n < s.n; ++n) {
                               for (std::size_t k = 0; k < plane; ++k) {
                                   double dot = 0.0;
                                   for (int c = 0; c < s.c; ++c) {
                                       const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * plane + k;
                                       if (c < first_class) {
                                           dp[c] = 0.0;
                                       } else {
                                           const double den = denom[c] + smooth;
                                           dp[c] = -(2.0 * target[idx] / den - (2.0 * inter[c] + smooth) / (den * den)) /
                                                   classes;
                                       }
                                       dot += dp[c] * p[idx];
                                   }
                                   for (int c = 0; c < s.c; ++c) {
                                       const std::size_t idx = (static_cast<std::size_t>(n) * s.c + c) * plane + k;
                                       (*g)[idx] += up * p[idx] * (dp[c] - dot);
                                   }
                               }
                           }
                       });
}

}  // namespace vaeunet::ag
