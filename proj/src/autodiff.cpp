#include "merging/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <utility>

#include "merging/kernels.hpp"
#include "merging/nnops.hpp"

namespace merging {

namespace nnops {

namespace {
void require(bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
}
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
    require(a.cols() == b.rows(), "matmul inner extents disagree");
    Tensor out({a.rows(), b.cols()});
    kernels::matmul(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add shape mismatch");
    Tensor out(a.shape());
    kernels::add(a.data(), b.data(), out.data(), a.size());
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "sub shape mismatch");
    Tensor out(a.shape());
    kernels::sub(a.data(), b.data(), out.data(), a.size());
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mul shape mismatch");
    Tensor out(a.shape());
    kernels::hadamard(a.data(), b.data(), out.data(), a.size());
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    kernels::scale(a.data(), s, out.data(), a.size());
    return out;
}

Tensor silu_mul(const Tensor& gate, const Tensor& up) {
    require(gate.same_shape(up), "silu_mul shape mismatch");
    Tensor out(gate.shape());
    const double* g = gate.data();
    const double* u = up.data();
    double* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = g[i] * sigmoid(g[i]) * u[i];
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    require(x.rank() == 2 && gain.rank() == 1, "rms_norm expects [T,d] and [d]");
    require(x.cols() == gain.extent(0), "rms_norm gain length mismatch");
    const std::size_t rows = x.rows(), d = x.cols();
    Tensor out({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        double* yr = out.data() + r * d;
        double ms = 0.0;
        for (std::size_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + eps);
        for (std::size_t i = 0; i < d; ++i) yr[i] = xr[i] * inv * gain[i];
    }
    return out;
}

Tensor rope(const Tensor& x, std::size_t n_heads) {
    require(x.rank() == 2, "rope expects [T,d]");
    require(n_heads >= 1 && x.cols() % n_heads == 0, "rope head split mismatch");
    const std::size_t rows = x.rows(), d = x.cols(), dh = d / n_heads;
    const std::size_t half = dh / 2;
    Tensor out = x;
    for (std::size_t t = 0; t < rows; ++t) {
        double* row = out.data() + t * d;
        for (std::size_t h = 0; h < n_heads; ++h) {
            double* head = row + h * dh;
            for (std::size_t i = 0; i < half; ++i) {
                const double freq =
                    std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                const double angle = static_cast<double>(t) * freq;
                const double c = std::cos(angle), s = std::sin(angle);
                const double a = head[2 * i], b = head[2 * i + 1];
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
    return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t n_heads) {
    require(q.rank() == 2 && q.same_shape(k) && q.same_shape(v),
            "causal_attention expects equal [T,d] inputs");
    require(n_heads >= 1 && q.cols() % n_heads == 0, "causal_attention head split mismatch");
    const std::size_t rows = q.rows(), d = q.cols(), dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({rows, d});
    std::vector<double> scores(rows);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t t = 0; t < rows; ++t) {
            const double* qt = q.data() + t * d + c0;
            for (std::size_t j = 0; j <= t; ++j) {
                const double* kj = k.data() + j * d + c0;
                double acc = 0.0;
                for (std::size_t i = 0; i < dh; ++i) acc += qt[i] * kj[i];
                scores[j] = acc * inv_sqrt;
            }
            softmax_row(scores.data(), scores.data(), t + 1);
            double* ot = out.data() + t * d + c0;
            for (std::size_t j = 0; j <= t; ++j) {
                const double* vj = v.data() + j * d + c0;
                const double p = scores[j];
                for (std::size_t i = 0; i < dh; ++i) ot[i] += p * vj[i];
            }
        }
    }
    return out;
}

Tensor embed_rows(const Tensor& table, std::span<const int> tokens) {
    require(table.rank() == 2, "embed_rows expects [V,d] table");
    const std::size_t d = table.cols();
    Tensor out({tokens.size(), d});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        require(tokens[t] >= 0 && static_cast<std::size_t>(tokens[t]) < table.rows(),
                "embed_rows token outside vocabulary");
        std::memcpy(out.data() + t * d, table.data() + static_cast<std::size_t>(tokens[t]) * d,
                    d * sizeof(double));
    }
    return out;
}

void softmax_row(const double* in, double* out, std::size_t n) {
    double mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        total += out[i];
    }
    const double inv = 1.0 / total;
    for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

void log_softmax_row(const double* in, double* out, std::size_t n) {
    double mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(in[i] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t i = 0; i < n; ++i) out[i] = in[i] - lse;
}

double sq_l2_distance(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "sq_l2_distance shape mismatch");
    require(a.rank() >= 1 && a.size() > 0, "sq_l2_distance on empty tensor");
    const std::size_t rows = a.rank() == 1 ? 1 : a.size() / a.shape().back();
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(rows);
}

double softmax_kl(const Tensor& target_logits, const Tensor& model_logits,
                  double temperature) {
    require(target_logits.same_shape(model_logits), "softmax_kl shape mismatch");
    if (!(temperature > 0.0)) throw ConfigError("softmax_kl temperature must be positive");
    const std::size_t n = target_logits.shape().back();
    const std::size_t rows = target_logits.size() / n;
    std::vector<double> lp(n), lq(n), buf(n);
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* tr = target_logits.data() + r * n;
        const double* mr = model_logits.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) buf[i] = tr[i] / temperature;
        log_softmax_row(buf.data(), lp.data(), n);
        for (std::size_t i = 0; i < n; ++i) buf[i] = mr[i] / temperature;
        log_softmax_row(buf.data(), lq.data(), n);
        for (std::size_t i = 0; i < n; ++i) acc += std::exp(lp[i]) * (lp[i] - lq[i]);
    }
    return acc * temperature * temperature / static_cast<double>(rows);
}

double cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const unsigned char> mask) {
    require(logits.rank() == 2, "cross_entropy expects [T,V] logits");
    require(targets.size() == logits.rows() && mask.size() == logits.rows(),
            "cross_entropy target/mask length mismatch");
    const std::size_t n = logits.cols();
    std::vector<double> ls(n);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        if (!mask[t]) continue;
        require(targets[t] >= 0 && static_cast<std::size_t>(targets[t]) < n,
                "cross_entropy target outside vocabulary");
        log_softmax_row(logits.data() + t * n, ls.data(), n);
        acc -= ls[static_cast<std::size_t>(targets[t])];
        ++count;
    }
    require(count > 0, "cross_entropy with empty mask");
    return acc / static_cast<double>(count);
}

}  // namespace nnops

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Tensor value, bool needs_grad,
               std::function<void(Tape&, const Tensor&)> back) {
    value.ensure_finite("autodiff op result");
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
    Var v = push(std::move(value), true, nullptr);
    leaves_.push_back(v.id);
    return v;
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Tensor& Tape::grad_buffer(std::uint32_t id) {
    if (grads_.size() < nodes_.size()) {
        grads_.resize(nodes_.size());
        grad_live_.resize(nodes_.size(), 0);
    }
    if (!grad_live_[id]) {
        grads_[id] = Tensor(nodes_[id].value.shape());
        grad_live_[id] = 1;
    }
    return grads_[id];
}

void Tape::accumulate(std::uint32_t id, const Tensor& g) {
    if (!nodes_[id].needs_grad) return;
    Tensor& buf = grad_buffer(id);
    kernels::add(buf.data(), g.data(), buf.data(), buf.size());
}

void Tape::accumulate_scaled(std::uint32_t id, const Tensor& g, double s) {
    if (!nodes_[id].needs_grad) return;
    Tensor& buf = grad_buffer(id);
    kernels::axpy(s, g.data(), buf.data(), buf.size());
}

Var Tape::add(Var a, Var b) {
    Tensor out = nnops::add(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [a, b](Tape& t, const Tensor& g) {
                    t.accumulate(a.id, g);
                    t.accumulate(b.id, g);
                });
}

Var Tape::sub(Var a, Var b) {
    Tensor out = nnops::sub(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [a, b](Tape& t, const Tensor& g) {
                    t.accumulate(a.id, g);
                    t.accumulate_scaled(b.id, g, -1.0);
                });
}

Var Tape::mul(Var a, Var b) {
    Tensor out = nnops::mul(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [a, b](Tape& t, const Tensor& g) {
                    if (t.nodes_[a.id].needs_grad)
                        t.accumulate(a.id, nnops::mul(g, t.value(b)));
                    if (t.nodes_[b.id].needs_grad)
                        t.accumulate(b.id, nnops::mul(g, t.value(a)));
                });
}

Var Tape::scale(Var a, double s) {
    Tensor out = nnops::scale(value(a), s);
    return push(std::move(out), tracked(a),
                [a, s](Tape& t, const Tensor& g) { t.accumulate_scaled(a.id, g, s); });
}

Var Tape::matmul(Var a, Var b) {
    Tensor out = nnops::matmul(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [a, b](Tape& t, const Tensor& g) {
                    const Tensor& av = t.value(a);
                    const Tensor& bv = t.value(b);
                    if (t.nodes_[a.id].needs_grad) {
                        Tensor da({av.rows(), av.cols()});
                        kernels::matmul_nt(g.data(), bv.data(), da.data(), g.rows(), g.cols(),
                                           bv.rows());
                        t.accumulate(a.id, da);
                    }
                    if (t.nodes_[b.id].needs_grad) {
                        Tensor db({bv.rows(), bv.cols()});
                        kernels::matmul_tn(av.data(), g.data(), db.data(), av.rows(), av.cols(),
                                           g.cols());
                        t.accumulate(b.id, db);
                    }
                });
}

Var Tape::silu_mul(Var gate, Var up) {
    Tensor out = nnops::silu_mul(value(gate), value(up));
    return push(std::move(out), tracked(gate) || tracked(up),
                [gate, up](Tape& t, const Tensor& g) {
                    const Tensor& gv = t.value(gate);
                    const Tensor& uv = t.value(up);
                    if (t.nodes_[gate.id].needs_grad) {
                        Tensor dg(gv.shape());
                        for (std::size_t i = 0; i < dg.size(); ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-gv[i]));
                            dg[i] = g[i] * uv[i] * s * (1.0 + gv[i] * (1.0 - s));
                        }
                        t.accumulate(gate.id, dg);
                    }
                    if (t.nodes_[up.id].needs_grad) {
                        Tensor du(uv.shape());
                        for (std::size_t i = 0; i < du.size(); ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-gv[i]));
                            du[i] = g[i] * gv[i] * s;
                        }
                        t.accumulate(up.id, du);
                    }
                });
}

Var Tape::rms_norm(Var x, Var gain, double eps) {
    Tensor out = nnops::rms_norm(value(x), value(gain), eps);
    return push(
        std::move(out), tracked(x) || tracked(gain),
        [x, gain, eps](Tape& t, const Tensor& g) {
            const Tensor& xv = t.value(x);
            const Tensor& gv = t.value(gain);
            const std::size_t rows = xv.rows(), d = xv.cols();
            const bool need_x = t.nodes_[x.id].needs_grad;
            const bool need_gain = t.nodes_[gain.id].needs_grad;
            Tensor dx(need_x ? xv.shape() : std::vector<std::size_t>{1});
            Tensor dgain(need_gain ? gv.shape() : std::vector<std::size_t>{1});
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xv.data() + r * d;
                const double* gr = g.data() + r * d;
                double ms = 0.0;
                for (std::size_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
                ms /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(ms + eps);
                if (need_x) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < d; ++i) dot += gr[i] * gv[i] * xr[i];
                    const double c = inv * inv * inv * dot / static_cast<double>(d);
                    double* dxr = dx.data() + r * d;
                    for (std::size_t i = 0; i < d; ++i)
                        dxr[i] = inv * gv[i] * gr[i] - c * xr[i];
                }
                if (need_gain) {
                    for (std::size_t i = 0; i < d; ++i) dgain[i] += gr[i] * inv * xr[i];
                }
            }
            if (need_x) t.accumulate(x.id, dx);
            if (need_gain) t.accumulate(gain.id, dgain);
        });
}

Var Tape::rope(Var x, std::size_t n_heads) {
    Tensor out = nnops::rope(value(x), n_heads);
    return push(std::move(out), tracked(x), [x, n_heads](Tape& t, const Tensor& g) {
        // the rotation is orthogonal, so the adjoint rotates by -angle
        const std::size_t rows = g.rows(), d = g.cols(), dh = d / n_heads;
        const std::size_t half = dh / 2;
        Tensor dx = g;
        for (std::size_t r = 0; r < rows; ++r) {
            double* row = dx.data() + r * d;
            for (std::size_t h = 0; h < n_heads; ++h) {
                double* head = row + h * dh;
                for (std::size_t i = 0; i < half; ++i) {
                    const double freq = std::pow(
                        10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                    const double angle = static_cast<double>(r) * freq;
                    const double c = std::cos(angle), s = std::sin(angle);
                    const double a = head[2 * i], b = head[2 * i + 1];
                    head[2 * i] = a * c + b * s;
                    head[2 * i + 1] = -a * s + b * c;
                }
            }
        }
        t.accumulate(x.id, dx);
    });
}

Var Tape::causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
    Tensor out = nnops::causal_attention(value(q), value(k), value(v), n_heads);
    return push(
        std::move(out), tracked(q) || tracked(k) || tracked(v),
        [q, k, v, n_heads](Tape& t, const Tensor& g) {
            const Tensor& qv = t.value(q);
            const Tensor& kv = t.value(k);
            const Tensor& vv = t.value(v);
            const std::size_t rows = qv.rows(), d = qv.cols(), dh = d / n_heads;
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
            Tensor dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
            std::vector<double> p(rows), dp(rows), ds(rows);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* qr = qv.data() + r * d + c0;
                    const double* gr = g.data() + r * d + c0;
                    for (std::size_t j = 0; j <= r; ++j) {
                        const double* kj = kv.data() + j * d + c0;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < dh; ++i) acc += qr[i] * kj[i];
                        p[j] = acc * inv_sqrt;
                    }
                    nnops::softmax_row(p.data(), p.data(), r + 1);
                    double mix = 0.0;
                    for (std::size_t j = 0; j <= r; ++j) {
                        const double* vj = vv.data() + j * d + c0;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < dh; ++i) acc += gr[i] * vj[i];
                        dp[j] = acc;
                        mix += p[j] * acc;
                    }
                    for (std::size_t j = 0; j <= r; ++j) ds[j] = p[j] * (dp[j] - mix);
                    double* dqr = dq.data() + r * d + c0;
                    for (std::size_t j = 0; j <= r; ++j) {
                        const double* kj = kv.data() + j * d + c0;
                        double* dkj = dk.data() + j * d + c0;
                        double* dvj = dv.data() + j * d + c0;
                        const double w = ds[j] * inv_sqrt;
                        for (std::size_t i = 0; i < dh; ++i) {
                            dqr[i] += w * kj[i];
                            dkj[i] += w * qr[i];
                            dvj[i] += p[j] * gr[i];
                        }
                    }
                }
            }
            t.accumulate(q.id, dq);
            t.accumulate(k.id, dk);
            t.accumulate(v.id, dv);
        });
}

Var Tape::embed_rows(Var table, std::span<const int> tokens) {
    Tensor out = nnops::embed_rows(value(table), tokens);
    std::vector<int> toks(tokens.begin(), tokens.end());
    return push(std::move(out), tracked(table),
                [table, toks = std::move(toks)](Tape& t, const Tensor& g) {
                    const Tensor& tv = t.value(table);
                    Tensor dt(tv.shape());
                    const std::size_t d = tv.cols();
                    for (std::size_t r = 0; r < toks.size(); ++r) {
                        double* dst = dt.data() + static_cast<std::size_t>(toks[r]) * d;
                        const double* src = g.data() + r * d;
                        for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
                    }
                    t.accumulate(table.id, dt);
                });
}

Var Tape::sq_l2_distance(Var a, Var b) {
    const double val = nnops::sq_l2_distance(value(a), value(b));
    return push(Tensor::scalar(val), tracked(a), [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        const std::size_t rows = av.rank() == 1 ? 1 : av.size() / av.shape().back();
        const double c = 2.0 * g[0] / static_cast<double>(rows);
        Tensor da(av.shape());
        for (std::size_t i = 0; i < da.size(); ++i) da[i] = c * (av[i] - bv[i]);
        t.accumulate(a.id, da);
    });
}

Var Tape::softmax_kl(Var target_logits, Var model_logits, double temperature) {
    const double val = nnops::softmax_kl(value(target_logits), value(model_logits), temperature);
    return push(
        Tensor::scalar(val), tracked(model_logits),
        [target_logits, model_logits, temperature](Tape& t, const Tensor& g) {
            const Tensor& tl = t.value(target_logits);
            const Tensor& ml = t.value(model_logits);
            const std::size_t n = tl.shape().back();
            const std::size_t rows = tl.size() / n;
            const double c = g[0] * temperature / static_cast<double>(rows);
            Tensor dm(ml.shape());
            std::vector<double> p(n), q(n), buf(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* tr = tl.data() + r * n;
                const double* mr = ml.data() + r * n;
                for (std::size_t i = 0; i < n; ++i) buf[i] = tr[i] / temperature;
                nnops::softmax_row(buf.data(), p.data(), n);
                for (std::size_t i = 0; i < n; ++i) buf[i] = mr[i] / temperature;
                nnops::softmax_row(buf.data(), q.data(), n);
                double* dr = dm.data() + r * n;
                for (std::size_t i = 0; i < n; ++i) dr[i] = c * (q[i] - p[i]);
            }
            t.accumulate(model_logits.id, dm);
        });
}

Var Tape::cross_entropy(Var logits, std::span<const int> targets,
                        std::span<const unsigned char> loss_mask) {
    const double val = nnops::cross_entropy(value(logits), targets, loss_mask);
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<unsigned char> msk(loss_mask.begin(), loss_mask.end());
    return push(Tensor::scalar(val), tracked(logits),
                [logits, tgt = std::move(tgt), msk = std::move(msk)](Tape& t, const Tensor& g) {
                    const Tensor& lv = t.value(logits);
                    const std::size_t n = lv.cols();
                    std::size_t count = 0;
                    for (auto m : msk) count += m ? 1 : 0;
                    const double c = g[0] / static_cast<double>(count);
                    Tensor dl(lv.shape());
                    std::vector<double> q(n);
                    for (std::size_t r = 0; r < lv.rows(); ++r) {
                        if (!msk[r]) continue;
                        nnops::softmax_row(lv.data() + r * n, q.data(), n);
                        double* dr = dl.data() + r * n;
                        for (std::size_t i = 0; i < n; ++i) dr[i] = c * q[i];
                        dr[static_cast<std::size_t>(tgt[r])] -= c;
                    }
                    t.accumulate(logits.id, dl);
                });
}

Var Tape::abs_deviation(Var x, Tensor anchor, double inv_scale) {
    const Tensor& xv = value(x);
    if (!xv.same_shape(anchor)) throw ConfigError("abs_deviation anchor shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) acc += std::fabs(xv[i] - anchor[i]);
    return push(Tensor::scalar(acc * inv_scale), tracked(x),
                [x, anchor = std::move(anchor), inv_scale](Tape& t, const Tensor& g) {
                    const Tensor& xv2 = t.value(x);
                    Tensor dx(xv2.shape());
                    const double c = g[0] * inv_scale;
                    for (std::size_t i = 0; i < dx.size(); ++i) {
                        const double d = xv2[i] - anchor[i];
                        dx[i] = d > 0.0 ? c : (d < 0.0 ? -c : 0.0);
                    }
                    t.accumulate(x.id, dx);
                });
}

Var Tape::sum_scalars(std::span<const Var> xs) {
    if (xs.empty()) throw ConfigError("sum_scalars on empty list");
    double acc = 0.0;
    bool needs = false;
    for (Var v : xs) {
        if (value(v).size() != 1) throw ConfigError("sum_scalars expects scalars");
        acc += value(v)[0];
        needs = needs || tracked(v);
    }
    std::vector<Var> vars(xs.begin(), xs.end());
    return push(Tensor::scalar(acc), needs,
                [vars = std::move(vars)](Tape& t, const Tensor& g) {
                    for (Var v : vars) t.accumulate(v.id, g);
                });
}

Var Tape::mix_unit(Var coeffs, std::size_t unit_index, const Tensor& base,
                   std::span<const Tensor* const> taus) {
    const Tensor& cv = value(coeffs);
    if (cv.rank() != 2) throw ConfigError("mix_unit expects [K,U] coefficients");
    const std::size_t experts = cv.rows();
    if (taus.size() != experts) throw ConfigError("mix_unit coefficient/task-vector count mismatch");
    Tensor out = base;
    for (std::size_t k = 0; k < experts; ++k) {
        const double a = cv.at(k, unit_index);
        if (a != 0.0) kernels::axpy(a, taus[k]->data(), out.data(), out.size());
    }
    std::vector<const Tensor*> tv(taus.begin(), taus.end());
    return push(std::move(out), tracked(coeffs),
                [coeffs, unit_index, tv = std::move(tv)](Tape& t, const Tensor& g) {
                    const std::size_t experts = tv.size();
                    const Tensor& cv2 = t.value(coeffs);
                    Tensor dc(cv2.shape());
                    for (std::size_t k = 0; k < experts; ++k)
                        dc.at(k, unit_index) = kernels::dot(g.data(), tv[k]->data(), g.size());
                    t.accumulate(coeffs.id, dc);
                });
}

Var Tape::mix_unit_chunked(Var packed, std::size_t packed_offset,
                           std::span<const std::size_t> bounds, const Tensor& base,
                           std::span<const Tensor* const> taus) {
    const Tensor& pv = value(packed);
    if (pv.rank() != 1) throw ConfigError("mix_unit_chunked expects a flat coefficient vector");
    const std::size_t experts = taus.size();
    const std::size_t chunks = bounds.size() - 1;
    Tensor out = base;
    for (std::size_t s = 0; s < chunks; ++s) {
        const std::size_t lo = bounds[s], hi = bounds[s + 1];
        for (std::size_t k = 0; k < experts; ++k) {
            const double a = pv[packed_offset + s * experts + k];
            if (a != 0.0) kernels::axpy(a, taus[k]->data() + lo, out.data() + lo, hi - lo);
        }
    }
    std::vector<const Tensor*> tv(taus.begin(), taus.end());
    std::vector<std::size_t> bds(bounds.begin(), bounds.end());
    return push(std::move(out), tracked(packed),
                [packed, packed_offset, tv = std::move(tv), bds = std::move(bds)](
                    Tape& t, const Tensor& g) {
                    const std::size_t experts = tv.size();
                    Tensor dp(t.value(packed).shape());
                    for (std::size_t s = 0; s + 1 < bds.size(); ++s) {
                        const std::size_t lo = bds[s], hi = bds[s + 1];
                        for (std::size_t k = 0; k < experts; ++k)
                            dp[packed_offset + s * experts + k] =
                                kernels::dot(g.data() + lo, tv[k]->data() + lo, hi - lo);
                    }
                    t.accumulate(packed.id, dp);
                });
}

DifferentiableScalar Tape::backward(Var scalar_output) {
    const Tensor& out = value(scalar_output);
    if (out.size() != 1) throw ConfigError("backward requires a scalar output");
    const double val = out[0];

    // reset gradient buffers; repeated backward therefore reproduces
    // identical results
    grads_.assign(nodes_.size(), Tensor());
    grad_live_.assign(nodes_.size(), 0);

    if (nodes_[scalar_output.id].needs_grad) {
        grad_buffer(scalar_output.id)[0] = 1.0;
        for (std::uint32_t id = scalar_output.id + 1; id-- > 0;) {
            if (grad_live_[id] && nodes_[id].back) nodes_[id].back(*this, grads_[id]);
        }
    }

    std::vector<Tensor> leaf_grads;
    leaf_grads.reserve(leaves_.size());
    for (auto id : leaves_) {
        if (grad_live_.size() > id && grad_live_[id])
            leaf_grads.push_back(grads_[id]);
        else
            leaf_grads.push_back(Tensor(nodes_[id].value.shape()));
    }
    return DifferentiableScalar(val, std::move(leaf_grads));
}

double grad_check(const std::function<DifferentiableScalar(std::span<const Tensor>)>& f,
                  std::span<const Tensor> point, double epsilon) {
    if (!(epsilon > 0.0)) throw ConfigError("grad_check epsilon must be positive");
    std::vector<Tensor> work(point.begin(), point.end());
    const DifferentiableScalar analytic = f(work);
    if (!std::isfinite(analytic.value()))
        throw NumericError("grad_check: objective non-finite at the evaluation point");
    if (analytic.leaf_count() != work.size())
        throw ConfigError("grad_check: leaf count differs from point size");

    // floor absorbs finite-difference cancellation noise on zero gradients
    const double floor = 1e-6 * std::max(1.0, std::fabs(analytic.value()));
    double worst = 0.0;
    for (std::size_t li = 0; li < work.size(); ++li) {
        for (std::size_t i = 0; i < work[li].size(); ++i) {
            const double saved = work[li][i];
            work[li][i] = saved + epsilon;
            const double up = f(work).value();
            work[li][i] = saved - epsilon;
            const double down = f(work).value();
            work[li][i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("grad_check: objective non-finite at a perturbed point");
            const double fd = (up - down) / (2.0 * epsilon);
            const double a = analytic.gradient(li)[i];
            const double rel = std::fabs(a - fd) / std::max(std::fabs(a) + std::fabs(fd), floor);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace merging
