#include "sttis/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace sttis {

namespace {

#if defined(__GLIBC__)
// Tape tensors are a few hundred KB and are freed after every sample. With
// glibc defaults that size goes through mmap, so each training step pays for
// munmap plus kernel page zeroing on the next allocation. Raising the
// thresholds keeps the buffers on the regular heap, where they are reused.
const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 128 << 20);
    mallopt(M_TRIM_THRESHOLD, 128 << 20);
    return true;
}();
#endif

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + a.shape_str() +
                                " and " + b.shape_str());
}

// The per-head width is 8 with the default model width; a fixed trip count
// lets the compiler fully unroll and vectorize the hot attention loops.
inline double dot_d(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    if (d == 8) {
        for (std::size_t j = 0; j < 8; ++j) s += a[j] * b[j];
    } else {
        for (std::size_t j = 0; j < d; ++j) s += a[j] * b[j];
    }
    return s;
}

inline void axpy_d(double* y, double a, const double* x, std::size_t d) {
    if (d == 8) {
        for (std::size_t j = 0; j < 8; ++j) y[j] += a * x[j];
    } else {
        for (std::size_t j = 0; j < d; ++j) y[j] += a * x[j];
    }
}

// Uniform draw in [0, 1) straight from the raw 64-bit output. Equivalent in
// quality to uniform_real_distribution for dropout masks but much cheaper,
// and its output is pinned down exactly, not left to the standard library.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Exponentiates a short score buffer in place. The inputs are softmax scores
// already shifted so the running maximum is 0, i.e. all values are <= 0, so
// overflow cannot happen and anything below exp(-708) may flush to 0.
// The vector path runs a degree-13 polynomial over 4 lanes; pipelining the
// fused multiply-adds across a whole row of head scores beats calling the
// scalar libm exp once per weight by several times. Max error ~1 ulp.
#if defined(__AVX2__) && defined(__FMA__)
inline __m256d exp4(__m256d x) {
    const __m256d log2e = _mm256_set1_pd(1.4426950408889634074);
    const __m256d ln2hi = _mm256_set1_pd(6.93147180369123816490e-01);
    const __m256d ln2lo = _mm256_set1_pd(1.90821492927058770002e-10);
    x = _mm256_max_pd(x, _mm256_set1_pd(-708.0));
    const __m256d n = _mm256_round_pd(_mm256_mul_pd(x, log2e),
                                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(n, ln2hi, x);
    r = _mm256_fnmadd_pd(n, ln2lo, r);
    __m256d p = _mm256_set1_pd(1.0 / 6227020800.0);  // 1/13!
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 479001600.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 39916800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 3628800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 362880.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 40320.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 5040.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 720.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 120.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 24.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 6.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(0.5));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0));
    // scale by 2^n through the exponent bits
    const __m128i ni = _mm256_cvtpd_epi32(n);
    const __m256i nl = _mm256_cvtepi32_epi64(ni);
    const __m256i pw = _mm256_slli_epi64(_mm256_add_epi64(nl, _mm256_set1_epi64x(1023)), 52);
    return _mm256_mul_pd(p, _mm256_castsi256_pd(pw));
}

inline void exp_inplace(double* w, std::size_t len) {
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) _mm256_storeu_pd(w + i, exp4(_mm256_loadu_pd(w + i)));
    if (i < len) {
        double tail[4] = {0.0, 0.0, 0.0, 0.0};
        std::copy_n(w + i, len - i, tail);
        _mm256_storeu_pd(tail, exp4(_mm256_loadu_pd(tail)));
        std::copy_n(tail, len - i, w + i);
    }
}
#else
inline void exp_inplace(double* w, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) w[i] = std::exp(w[i]);
}
#endif

}  // namespace

// Gradients are allocated in backward(); forward-only passes never pay for
// them.
Var Tape::push(Tensor value) {
    nodes_.push_back(Node{std::move(value), Tensor{}, {}});
    return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::input(Tensor value) { return push(std::move(value)); }

Var Tape::param(ParameterStore& store, const std::string& name) {
    Param& p = store.get(name);
    Var v = push(p.value);
    bindings_.emplace_back(v, &p);
    if (std::find(stores_.begin(), stores_.end(), &store) == stores_.end())
        stores_.push_back(&store);
    return v;
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
        shape_error("matmul", A, B);
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor out = Tensor::uninit({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &A.data[i * k];
        double* orow = &out.data[i * n];
        // The p = 0 term seeds the row, so the output is written exactly once.
        const double av0 = arow[0];
        for (std::size_t j = 0; j < n; ++j) orow[j] = av0 * B.data[j];
        for (std::size_t p = 1; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            axpy_d(orow, av, &B.data[p * n], n);
        }
    }
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, b, o, m, k, n] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& A2 = nodes_[a].value;
        const Tensor& B2 = nodes_[b].value;
        Tensor& dA = nodes_[a].grad;
        Tensor& dB = nodes_[b].grad;
        // dA = G B^T via a materialized transpose so the inner loop runs
        // contiguously; dB = A^T G.
        Tensor::Buffer bt(n * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B2.data[p * n + j];
        for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &G.data[i * n];
            double* darow = &dA.data[i * k];
            for (std::size_t j = 0; j < n; ++j) {
                const double gv = grow[j];
                if (gv == 0.0) continue;
                axpy_d(darow, gv, &bt[j * k], k);
            }
            const double* arow = &A2.data[i * k];
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                if (av == 0.0) continue;
                axpy_d(&dB.data[p * n], av, grow, n);
            }
        }
    };
    return o;
}

Var Tape::linear(Var a, Var w, Var bias) {
    const Tensor& A = nodes_[a].value;
    const Tensor& W = nodes_[w].value;
    const Tensor& B = nodes_[bias].value;
    if (A.shape.size() != 2 || W.shape.size() != 2 || A.shape[1] != W.shape[0])
        shape_error("linear", A, W);
    const std::size_t m = A.shape[0], k = A.shape[1], n = W.shape[1];
    if (B.size() != n) shape_error("linear", W, B);
    Tensor out = Tensor::uninit({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &A.data[i * k];
        double* orow = &out.data[i * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] = B.data[j];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            axpy_d(orow, av, &W.data[p * n], n);
        }
    }
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, w, bias, o, m, k, n] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& A2 = nodes_[a].value;
        const Tensor& W2 = nodes_[w].value;
        Tensor& dA = nodes_[a].grad;
        Tensor& dW = nodes_[w].grad;
        Tensor& dB = nodes_[bias].grad;
        Tensor::Buffer wt(n * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) wt[j * k + p] = W2.data[p * n + j];
        for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &G.data[i * n];
            double* darow = &dA.data[i * k];
            for (std::size_t j = 0; j < n; ++j) {
                const double gv = grow[j];
                if (gv == 0.0) continue;
                dB.data[j] += gv;
                axpy_d(darow, gv, &wt[j * k], k);
            }
            const double* arow = &A2.data[i * k];
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                if (av == 0.0) continue;
                axpy_d(&dW.data[p * n], av, grow, n);
            }
        }
    };
    return o;
}

Var Tape::linear_relu(Var a, Var w, Var bias) {
    const Tensor& A = nodes_[a].value;
    const Tensor& W = nodes_[w].value;
    const Tensor& B = nodes_[bias].value;
    if (A.shape.size() != 2 || W.shape.size() != 2 || A.shape[1] != W.shape[0])
        shape_error("linear_relu", A, W);
    const std::size_t m = A.shape[0], k = A.shape[1], n = W.shape[1];
    if (B.size() != n) shape_error("linear_relu", W, B);
    Tensor out = Tensor::uninit({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &A.data[i * k];
        double* orow = &out.data[i * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] = B.data[j];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            axpy_d(orow, av, &W.data[p * n], n);
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] = std::max(0.0, orow[j]);
    }
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, w, bias, o, m, k, n] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& O = nodes_[o].value;
        const Tensor& A2 = nodes_[a].value;
        const Tensor& W2 = nodes_[w].value;
        Tensor& dA = nodes_[a].grad;
        Tensor& dW = nodes_[w].grad;
        Tensor& dB = nodes_[bias].grad;
        Tensor::Buffer wt(n * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) wt[j * k + p] = W2.data[p * n + j];
        for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &G.data[i * n];
            const double* orow = &O.data[i * n];
            double* darow = &dA.data[i * k];
            // The relu gate folds into the incoming gradient; a clamped output
            // of exactly 0 passes nothing (matching the standalone relu).
            for (std::size_t j = 0; j < n; ++j) {
                const double gv = orow[j] > 0.0 ? grow[j] : 0.0;
                if (gv == 0.0) continue;
                dB.data[j] += gv;
                axpy_d(darow, gv, &wt[j * k], k);
            }
            const double* arow = &A2.data[i * k];
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                if (av == 0.0) continue;
                double* dwrow = &dW.data[p * n];
                for (std::size_t j = 0; j < n; ++j)
                    if (orow[j] > 0.0) dwrow[j] += av * grow[j];
            }
        }
    };
    return o;
}

Var Tape::dropout_add(Var a, Var res, double rate, std::mt19937_64& rng, bool training) {
    const Tensor& A = nodes_[a].value;
    const Tensor& R = nodes_[res].value;
    if (A.shape != R.shape) shape_error("dropout_add", A, R);
    if (!training || rate <= 0.0) {
        Tensor out = Tensor::uninit(A.shape);
        for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] + R.data[i];
        Var o = push(std::move(out));
        nodes_[o].back = [this, a, res, o] {
            const Tensor& G = nodes_[o].grad;
            for (std::size_t i = 0; i < G.size(); ++i) {
                nodes_[a].grad.data[i] += G.data[i];
                nodes_[res].grad.data[i] += G.data[i];
            }
        };
        return o;
    }
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(A.size());
    Tensor out = Tensor::uninit(A.shape);
    for (std::size_t i = 0; i < A.size(); ++i) {
        (*mask)[i] = uniform01(rng) < keep ? 1.0 / keep : 0.0;
        out.data[i] = A.data[i] * (*mask)[i] + R.data[i];
    }
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, res, o, mask] {
        const Tensor& G = nodes_[o].grad;
        for (std::size_t i = 0; i < G.size(); ++i) {
            nodes_[a].grad.data[i] += G.data[i] * (*mask)[i];
            nodes_[res].grad.data[i] += G.data[i];
        }
    };
    return o;
}

Var Tape::rows_select(Var table, std::vector<std::size_t> idx) {
    const Tensor& T = nodes_[table].value;
    if (T.shape.size() != 2) shape_error("rows_select", T, T);
    const std::size_t r = T.shape[0], c = T.shape[1];
    for (std::size_t i : idx)
        if (i >= r) throw std::invalid_argument("rows_select: index out of range");
    const std::size_t m = idx.size();
    Tensor out = Tensor::uninit({m, c});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(&T.data[idx[i] * c], c, &out.data[i * c]);
    Var o = push(std::move(out));
    auto ix = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    nodes_[o].back = [this, table, o, ix, c] {
        const Tensor& G = nodes_[o].grad;
        Tensor& dT = nodes_[table].grad;
        for (std::size_t i = 0; i < ix->size(); ++i) {
            const double* grow = &G.data[i * c];
            double* drow = &dT.data[(*ix)[i] * c];
            for (std::size_t j = 0; j < c; ++j) drow[j] += grow[j];
        }
    };
    return o;
}

Var Tape::add(Var a, Var b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B)) shape_error("add", A, B);
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, b, o] {
        const Tensor& G = nodes_[o].grad;
        for (std::size_t i = 0; i < G.size(); ++i) {
            nodes_[a].grad.data[i] += G.data[i];
            nodes_[b].grad.data[i] += G.data[i];
        }
    };
    return o;
}

Var Tape::sub(Var a, Var b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B)) shape_error("sub", A, B);
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, b, o] {
        const Tensor& G = nodes_[o].grad;
        for (std::size_t i = 0; i < G.size(); ++i) {
            nodes_[a].grad.data[i] += G.data[i];
            nodes_[b].grad.data[i] -= G.data[i];
        }
    };
    return o;
}

Var Tape::add_rowvec(Var a, Var bias) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[bias].value;
    const std::size_t m = A.rows(), n = A.cols();
    if (B.size() != n) shape_error("add_rowvec", A, B);
    Tensor out = A;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += B.data[j];
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, bias, o, m, n] {
        const Tensor& G = nodes_[o].grad;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                nodes_[a].grad.data[i * n + j] += G.data[i * n + j];
                nodes_[bias].grad.data[j] += G.data[i * n + j];
            }
    };
    return o;
}

Var Tape::scale(Var a, double c) {
    Tensor out = nodes_[a].value;
    for (double& v : out.data) v *= c;
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, o, c] {
        const Tensor& G = nodes_[o].grad;
        for (std::size_t i = 0; i < G.size(); ++i) nodes_[a].grad.data[i] += c * G.data[i];
    };
    return o;
}

Var Tape::relu(Var a) {
    Tensor out = nodes_[a].value;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, o] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& A = nodes_[a].value;
        for (std::size_t i = 0; i < G.size(); ++i)
            if (A.data[i] > 0.0) nodes_[a].grad.data[i] += G.data[i];
    };
    return o;
}

Var Tape::softmax_rows(Var a) {
    const Tensor& A = nodes_[a].value;
    const std::size_t m = A.rows(), n = A.cols();
    Tensor out = A;
    for (std::size_t i = 0; i < m; ++i) {
        double* row = &out.data[i * n];
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
    }
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, o, m, n] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& W = nodes_[o].value;
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += G.data[i * n + j] * W.data[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                nodes_[a].grad.data[i * n + j] += W.data[i * n + j] * (G.data[i * n + j] - dot);
        }
    };
    return o;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t m = nodes_[parts[0]].value.rows();
    std::size_t total = 0;
    for (Var p : parts) {
        const Tensor& T = nodes_[p].value;
        if (T.rows() != m) shape_error("concat_cols", nodes_[parts[0]].value, T);
        total += T.cols();
    }
    Tensor out = Tensor::uninit({m, total});
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& T = nodes_[p].value;
        const std::size_t c = T.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(&out.data[i * total + off], &T.data[i * c], c * sizeof(double));
        off += c;
    }
    Var o = push(std::move(out));
    std::vector<Var> ps = parts;
    nodes_[o].back = [this, ps, o, m, total] {
        const Tensor& G = nodes_[o].grad;
        std::size_t off2 = 0;
        for (Var p : ps) {
            const std::size_t c = nodes_[p].value.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    nodes_[p].grad.data[i * c + j] += G.data[i * total + off2 + j];
            off2 += c;
        }
    };
    return o;
}

Var Tape::slice_rows(Var a, std::size_t lo, std::size_t hi) {
    const Tensor& A = nodes_[a].value;
    if (A.shape.size() != 2 || lo >= hi || hi > A.rows())
        throw std::invalid_argument("slice_rows: bad range [" + std::to_string(lo) + "," +
                                    std::to_string(hi) + ") for " + A.shape_str());
    const std::size_t c = A.cols(), m = hi - lo;
    Tensor out = Tensor::uninit({m, c});
    std::memcpy(out.data.data(), &A.data[lo * c], m * c * sizeof(double));
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, o, lo, c, m] {
        const Tensor& G = nodes_[o].grad;
        double* dst = &nodes_[a].grad.data[lo * c];
        for (std::size_t i = 0; i < m * c; ++i) dst[i] += G.data[i];
    };
    return o;
}

Var Tape::layer_norm(Var a, Var gain, Var bias) {
    const Tensor& A = nodes_[a].value;
    const std::size_t m = A.rows(), n = A.cols();
    if (nodes_[gain].value.size() != n || nodes_[bias].value.size() != n)
        shape_error("layer_norm", A, nodes_[gain].value);
    constexpr double eps = 1e-5;
    Tensor out = Tensor::uninit({m, n});
    Tensor xhat = Tensor::uninit({m, n});
    std::vector<double> inv_sigma(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += A.data[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = A.data[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (A.data[i * n + j] - mu) * inv_sigma[i];
            xhat.data[i * n + j] = xh;
            out.data[i * n + j] = xh * nodes_[gain].value.data[j] + nodes_[bias].value.data[j];
        }
    }
    Var o = push(std::move(out));
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_sigma));
    nodes_[o].back = [this, a, gain, bias, o, m, n, xh, is] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& gm = nodes_[gain].value;
        for (std::size_t i = 0; i < m; ++i) {
            double sum_gg = 0.0, sum_ggx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double gg = G.data[i * n + j] * gm.data[j];
                sum_gg += gg;
                sum_ggx += gg * xh->data[i * n + j];
                nodes_[gain].grad.data[j] += G.data[i * n + j] * xh->data[i * n + j];
                nodes_[bias].grad.data[j] += G.data[i * n + j];
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
                const double gg = G.data[i * n + j] * gm.data[j];
                nodes_[a].grad.data[i * n + j] +=
                    (*is)[i] * (gg - inv_n * sum_gg - xh->data[i * n + j] * inv_n * sum_ggx);
            }
        }
    };
    return o;
}

Var Tape::dropout(Var a, double rate, std::mt19937_64& rng, bool training) {
    if (!training || rate <= 0.0) {
        // identity node so callers need not branch
        Tensor out = nodes_[a].value;
        Var o = push(std::move(out));
        nodes_[o].back = [this, a, o] {
            const Tensor& G = nodes_[o].grad;
            for (std::size_t i = 0; i < G.size(); ++i) nodes_[a].grad.data[i] += G.data[i];
        };
        return o;
    }
    const Tensor& A = nodes_[a].value;
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(A.size());
    Tensor out = A;
    for (std::size_t i = 0; i < A.size(); ++i) {
        (*mask)[i] = uniform01(rng) < keep ? 1.0 / keep : 0.0;
        out.data[i] *= (*mask)[i];
    }
    Var o = push(std::move(out));
    nodes_[o].back = [this, a, o, mask] {
        const Tensor& G = nodes_[o].grad;
        for (std::size_t i = 0; i < G.size(); ++i)
            nodes_[a].grad.data[i] += G.data[i] * (*mask)[i];
    };
    return o;
}

Var Tape::conv1d(Var x, Var kernel, Var bias) {
    const Tensor& X = nodes_[x].value;
    const Tensor& K = nodes_[kernel].value;
    const Tensor& B = nodes_[bias].value;
    if (X.shape.size() != 2 || K.shape.size() != 2) shape_error("conv1d", X, K);
    const std::size_t n = X.shape[0], w = X.shape[1];
    const std::size_t f = K.shape[0], p = K.shape[1];
    if (p > w) shape_error("conv1d", X, K);
    if (B.size() != f) shape_error("conv1d", K, B);
    const std::size_t lout = w - p + 1;
    Tensor out = Tensor::uninit({n, f * lout});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c)
            for (std::size_t t = 0; t < lout; ++t) {
                double acc = B.data[c];
                for (std::size_t u = 0; u < p; ++u)
                    acc += K.data[c * p + u] * X.data[i * w + t + u];
                out.data[i * f * lout + c * lout + t] = acc;
            }
    Var o = push(std::move(out));
    nodes_[o].back = [this, x, kernel, bias, o, n, w, f, p, lout] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& X2 = nodes_[x].value;
        const Tensor& K2 = nodes_[kernel].value;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < f; ++c)
                for (std::size_t t = 0; t < lout; ++t) {
                    const double g = G.data[i * f * lout + c * lout + t];
                    if (g == 0.0) continue;
                    nodes_[bias].grad.data[c] += g;
                    for (std::size_t u = 0; u < p; ++u) {
                        nodes_[kernel].grad.data[c * p + u] += g * X2.data[i * w + t + u];
                        nodes_[x].grad.data[i * w + t + u] += g * K2.data[c * p + u];
                    }
                }
    };
    return o;
}

Var Tape::sum_all(Var a) {
    const Tensor& A = nodes_[a].value;
    double s = 0.0;
    for (double v : A.data) s += v;
    Var o = push(Tensor::scalar(s));
    nodes_[o].back = [this, a, o] {
        const double g = nodes_[o].grad.data[0];
        for (double& d : nodes_[a].grad.data) d += g;
    };
    return o;
}

Var Tape::sum_squares(Var a) {
    const Tensor& A = nodes_[a].value;
    double s = 0.0;
    for (double v : A.data) s += v * v;
    Var o = push(Tensor::scalar(s));
    nodes_[o].back = [this, a, o] {
        const double g = nodes_[o].grad.data[0];
        const Tensor& A2 = nodes_[a].value;
        for (std::size_t i = 0; i < A2.size(); ++i)
            nodes_[a].grad.data[i] += 2.0 * A2.data[i] * g;
    };
    return o;
}

Var Tape::sqrt_scalar(Var a) {
    const Tensor& A = nodes_[a].value;
    if (!A.is_scalar()) throw std::invalid_argument("sqrt_scalar: input not scalar");
    const double r = std::sqrt(A.data[0]);
    Var o = push(Tensor::scalar(r));
    nodes_[o].back = [this, a, o, r] {
        // guarded at r == 0 (perfect fit): subgradient 0
        if (r > 0.0) nodes_[a].grad.data[0] += nodes_[o].grad.data[0] * 0.5 / r;
    };
    return o;
}

Var Tape::neighbor_attention(Var q, Var k, Var val, const RegionGraph& graph, double drop_rate,
                             std::mt19937_64* rng, bool training, ScoreCounter* counter,
                             AttentionCapture* capture, int capture_layer, int capture_head,
                             std::size_t blocks, std::size_t capture_block) {
    const Tensor& Q = nodes_[q].value;
    const Tensor& K = nodes_[k].value;
    const Tensor& V = nodes_[val].value;
    const std::size_t n = graph.n;
    const std::size_t rows = blocks * n, d = Q.cols();
    if (Q.rows() != rows || K.rows() != rows || K.cols() != d || V.rows() != rows)
        shape_error("neighbor_attention", Q, K);
    const std::size_t dv = V.cols();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const bool drop = training && drop_rate > 0.0 && rng != nullptr;
    const double keep = 1.0 - drop_rate;

    auto weights = std::make_shared<std::vector<std::vector<double>>>(rows);  // softmax, pre-mask
    auto masks = std::make_shared<std::vector<std::vector<double>>>(drop ? rows : 0);
    Tensor out({rows, dv});
    std::vector<double> wt;
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t base = b * n;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = base + i;
            const auto& nb = graph.neighbors(i);
            auto& w = (*weights)[r];
            w.resize(nb.size());
            double mx = -1e300;
            const double* qi = &Q.data[r * d];
            for (std::size_t a2 = 0; a2 < nb.size(); ++a2) {
                double s = 0.0;
                const double* kv = &K.data[(base + nb[a2]) * d];
                for (std::size_t j = 0; j < d; ++j) s += qi[j] * kv[j];
                w[a2] = s * inv_sqrt_d;
                mx = std::max(mx, w[a2]);
            }
            if (counter) counter->evals += static_cast<long long>(nb.size());
            double sum = 0.0;
            for (double& s : w) {
                s = std::exp(s - mx);
                sum += s;
            }
            for (double& s : w) s /= sum;
            if (capture && b == capture_block)
                for (std::size_t a2 = 0; a2 < nb.size(); ++a2)
                    capture->dli.push_back({capture_layer, capture_head, i, nb[a2], w[a2]});
            const double* eff = w.data();
            if (drop) {
                auto& m = (*masks)[r];
                m.resize(nb.size());
                wt.resize(nb.size());
                for (std::size_t a2 = 0; a2 < nb.size(); ++a2) {
                    m[a2] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
                    wt[a2] = w[a2] * m[a2];
                }
                eff = wt.data();
            }
            double* orow = &out.data[r * dv];
            for (std::size_t a2 = 0; a2 < nb.size(); ++a2) {
                const double* vrow = &V.data[(base + nb[a2]) * dv];
                for (std::size_t j = 0; j < dv; ++j) orow[j] += eff[a2] * vrow[j];
            }
        }
    }
    Var o = push(std::move(out));
    const RegionGraph* gp = &graph;
    nodes_[o].back = [this, q, k, val, o, gp, blocks, n, d, dv, inv_sqrt_d, weights, masks,
                      drop] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& Q2 = nodes_[q].value;
        const Tensor& K2 = nodes_[k].value;
        const Tensor& V2 = nodes_[val].value;
        std::vector<double> dw;
        for (std::size_t b = 0; b < blocks; ++b) {
            const std::size_t base = b * n;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t r = base + i;
                const auto& nb = gp->neighbors(i);
                const auto& w = (*weights)[r];
                const double* gi = &G.data[r * dv];
                // dL/d(masked weight a) = g . v_a ; chain through mask then softmax
                dw.resize(nb.size());
                for (std::size_t a2 = 0; a2 < nb.size(); ++a2) {
                    const std::size_t vrow_idx = base + nb[a2];
                    const double* vrow = &V2.data[vrow_idx * dv];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dv; ++j) acc += gi[j] * vrow[j];
                    const double m = drop ? (*masks)[r][a2] : 1.0;
                    double* dvrow = &nodes_[val].grad.data[vrow_idx * dv];
                    const double wm = w[a2] * m;
                    for (std::size_t j = 0; j < dv; ++j) dvrow[j] += wm * gi[j];
                    dw[a2] = acc * m;
                }
                double dot = 0.0;
                for (std::size_t a2 = 0; a2 < nb.size(); ++a2) dot += dw[a2] * w[a2];
                const double* qi = &Q2.data[r * d];
                double* dqi = &nodes_[q].grad.data[r * d];
                for (std::size_t a2 = 0; a2 < nb.size(); ++a2) {
                    const double ds = w[a2] * (dw[a2] - dot) * inv_sqrt_d;
                    if (ds == 0.0) continue;
                    const std::size_t krow_idx = base + nb[a2];
                    const double* kv = &K2.data[krow_idx * d];
                    double* dkv = &nodes_[k].grad.data[krow_idx * d];
                    for (std::size_t j = 0; j < d; ++j) {
                        dqi[j] += ds * kv[j];
                        dkv[j] += ds * qi[j];
                    }
                }
            }
        }
    };
    return o;
}

Var Tape::multihead_neighbor_attention(Var q, Var k, Var val, const RegionGraph& graph,
                                       std::size_t heads, double drop_rate, std::mt19937_64* rng,
                                       bool training, ScoreCounter* counter,
                                       AttentionCapture* capture, int capture_layer,
                                       std::size_t blocks, std::size_t capture_block) {
    const Tensor& Q = nodes_[q].value;
    const Tensor& K = nodes_[k].value;
    const Tensor& V = nodes_[val].value;
    const std::size_t n = graph.n;
    const std::size_t rows = blocks * n, d = V.cols(), hd = heads * d;
    if (Q.rows() != rows || Q.cols() != hd || K.rows() != rows || K.cols() != hd ||
        V.rows() != rows)
        shape_error("multihead_neighbor_attention", Q, K);
    if (heads == 0 || heads > 64)
        throw std::invalid_argument("multihead_neighbor_attention: heads must be in [1, 64]");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const bool drop = training && drop_rate > 0.0 && rng != nullptr;
    const double keep = 1.0 - drop_rate;

    // Flat per-row layout: for row r the weights of head h sit at
    // off[r] + h*deg(r) .. off[r] + (h+1)*deg(r), matching `heads` separate
    // single-head calls row by row.
    auto off = std::make_shared<std::vector<std::size_t>>(rows + 1);
    for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = b * n + i;
            (*off)[r + 1] = (*off)[r] + heads * graph.neighbors(i).size();
        }
    auto weights = std::make_shared<Tensor::Buffer>(off->back());
    auto masks = std::make_shared<Tensor::Buffer>(drop ? off->back() : 0);
    Tensor out({rows, hd});
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t base = b * n;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = base + i;
            const auto& nb = graph.neighbors(i);
            const std::size_t nbs = nb.size();
            double* wrow = &(*weights)[(*off)[r]];
            const double* qi = &Q.data[r * hd];
            // Neighbor-major scores so each K row is read once, contiguously.
            for (std::size_t a2 = 0; a2 < nbs; ++a2) {
                const double* kv = &K.data[(base + nb[a2]) * hd];
                for (std::size_t h = 0; h < heads; ++h)
                    wrow[h * nbs + a2] = dot_d(qi + h * d, kv + h * d, d) * inv_sqrt_d;
            }
            for (std::size_t h = 0; h < heads; ++h) {
                double* w = wrow + h * nbs;
                double mx = -1e300;
                for (std::size_t a2 = 0; a2 < nbs; ++a2) mx = std::max(mx, w[a2]);
                for (std::size_t a2 = 0; a2 < nbs; ++a2) w[a2] -= mx;
            }
            exp_inplace(wrow, heads * nbs);
            for (std::size_t h = 0; h < heads; ++h) {
                double* w = wrow + h * nbs;
                double sum = 0.0;
                for (std::size_t a2 = 0; a2 < nbs; ++a2) sum += w[a2];
                for (std::size_t a2 = 0; a2 < nbs; ++a2) w[a2] /= sum;
                if (capture && b == capture_block)
                    for (std::size_t a2 = 0; a2 < nbs; ++a2)
                        capture->dli.push_back(
                            {capture_layer, static_cast<int>(h), i, nb[a2], w[a2]});
                if (drop) {
                    double* m = &(*masks)[(*off)[r] + h * nbs];
                    for (std::size_t a2 = 0; a2 < nbs; ++a2)
                        m[a2] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
                }
            }
            if (counter) counter->evals += static_cast<long long>(heads * nbs);
            double* orow = &out.data[r * hd];
            const double* mrow = drop ? &(*masks)[(*off)[r]] : nullptr;
            for (std::size_t a2 = 0; a2 < nbs; ++a2) {
                const double* vrow = &V.data[(base + nb[a2]) * d];
                for (std::size_t h = 0; h < heads; ++h) {
                    const double eff =
                        wrow[h * nbs + a2] * (drop ? mrow[h * nbs + a2] : 1.0);
                    if (eff == 0.0) continue;
                    axpy_d(orow + h * d, eff, vrow, d);
                }
            }
        }
    }
    Var o = push(std::move(out));
    const RegionGraph* gp = &graph;
    nodes_[o].back = [this, q, k, val, o, gp, blocks, n, heads, d, hd, inv_sqrt_d, off, weights,
                      masks, drop] {
        const Tensor& G = nodes_[o].grad;
        const Tensor& Q2 = nodes_[q].value;
        const Tensor& K2 = nodes_[k].value;
        const Tensor& V2 = nodes_[val].value;
        std::vector<double> dw;
        for (std::size_t b = 0; b < blocks; ++b) {
            const std::size_t base = b * n;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t r = base + i;
                const auto& nb = gp->neighbors(i);
                const std::size_t nbs = nb.size();
                const double* wrow = &(*weights)[(*off)[r]];
                const double* mrow = drop ? &(*masks)[(*off)[r]] : nullptr;
                const double* gi = &G.data[r * hd];
                const double* qi = &Q2.data[r * hd];
                double* dqi = &nodes_[q].grad.data[r * hd];
                dw.resize(heads * nbs);
                for (std::size_t a2 = 0; a2 < nbs; ++a2) {
                    const std::size_t vrow_idx = base + nb[a2];
                    const double* vrow = &V2.data[vrow_idx * d];
                    double* dvrow = &nodes_[val].grad.data[vrow_idx * d];
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double* gh = gi + h * d;
                        const double acc = dot_d(gh, vrow, d);
                        const double m = drop ? mrow[h * nbs + a2] : 1.0;
                        const double wm = wrow[h * nbs + a2] * m;
                        if (wm != 0.0) axpy_d(dvrow, wm, gh, d);
                        dw[h * nbs + a2] = acc * m;
                    }
                }
                double dots[64];
                for (std::size_t h = 0; h < heads; ++h) {
                    double dot = 0.0;
                    for (std::size_t a2 = 0; a2 < nbs; ++a2)
                        dot += dw[h * nbs + a2] * wrow[h * nbs + a2];
                    dots[h] = dot;
                }
                for (std::size_t a2 = 0; a2 < nbs; ++a2) {
                    const std::size_t krow_idx = base + nb[a2];
                    const double* kv = &K2.data[krow_idx * hd];
                    double* dkv = &nodes_[k].grad.data[krow_idx * hd];
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double ds =
                            wrow[h * nbs + a2] * (dw[h * nbs + a2] - dots[h]) * inv_sqrt_d;
                        if (ds == 0.0) continue;
                        axpy_d(dqi + h * d, ds, kv + h * d, d);
                        axpy_d(dkv + h * d, ds, qi + h * d, d);
                    }
                }
            }
        }
    };
    return o;
}

Var Tape::temporal_attention(Var q, const std::vector<Var>& keys, const std::vector<Var>& values,
                             double drop_rate, std::mt19937_64* rng, bool training,
                             AttentionCapture* capture, int capture_head) {
    if (keys.empty() || keys.size() != values.size())
        throw std::invalid_argument("temporal_attention: empty or mismatched context");
    const Tensor& Q = nodes_[q].value;
    const std::size_t n = Q.rows(), d = Q.cols();
    const std::size_t nq = keys.size();
    for (std::size_t s = 0; s < nq; ++s) {
        if (nodes_[keys[s]].value.rows() != n || nodes_[keys[s]].value.cols() != d)
            shape_error("temporal_attention", Q, nodes_[keys[s]].value);
        if (nodes_[values[s]].value.rows() != n)
            shape_error("temporal_attention", Q, nodes_[values[s]].value);
    }
    const std::size_t dv = nodes_[values[0]].value.cols();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const bool drop = training && drop_rate > 0.0 && rng != nullptr;
    const double keep = 1.0 - drop_rate;

    auto weights = std::make_shared<std::vector<double>>(n * nq);
    auto masks = std::make_shared<std::vector<double>>(drop ? n * nq : 0);
    Tensor out({n, dv});
    for (std::size_t i = 0; i < n; ++i) {
        double* w = &(*weights)[i * nq];
        double mx = -1e300;
        for (std::size_t s = 0; s < nq; ++s) {
            const double* qi = &Q.data[i * d];
            const double* ks = &nodes_[keys[s]].value.data[i * d];
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += qi[j] * ks[j];
            w[s] = acc * inv_sqrt_d;
            mx = std::max(mx, w[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s < nq; ++s) {
            w[s] = std::exp(w[s] - mx);
            sum += w[s];
        }
        for (std::size_t s = 0; s < nq; ++s) w[s] /= sum;
        if (capture)
            for (std::size_t s = 0; s < nq; ++s)
                capture->dlm.push_back({capture_head, i, s, w[s]});
        double* orow = &out.data[i * dv];
        for (std::size_t s = 0; s < nq; ++s) {
            double eff = w[s];
            if (drop) {
                (*masks)[i * nq + s] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
                eff *= (*masks)[i * nq + s];
            }
            const double* vrow = &nodes_[values[s]].value.data[i * dv];
            for (std::size_t j = 0; j < dv; ++j) orow[j] += eff * vrow[j];
        }
    }
    Var o = push(std::move(out));
    std::vector<Var> ks = keys, vs = values;
    nodes_[o].back = [this, q, ks, vs, o, n, d, dv, inv_sqrt_d, weights, masks, drop] {
        const Tensor& G = nodes_[o].grad;
        const std::size_t nq = ks.size();
        for (std::size_t i = 0; i < n; ++i) {
            const double* w = &(*weights)[i * nq];
            const double* gi = &G.data[i * dv];
            std::vector<double> dw(nq);
            for (std::size_t s = 0; s < nq; ++s) {
                const double m = drop ? (*masks)[i * nq + s] : 1.0;
                const double* vrow = &nodes_[vs[s]].value.data[i * dv];
                double acc = 0.0;
                for (std::size_t j = 0; j < dv; ++j) acc += gi[j] * vrow[j];
                dw[s] = acc * m;
                for (std::size_t j = 0; j < dv; ++j)
                    nodes_[vs[s]].grad.data[i * dv + j] += w[s] * m * gi[j];
            }
            double dot = 0.0;
            for (std::size_t s = 0; s < nq; ++s) dot += dw[s] * w[s];
            for (std::size_t s = 0; s < nq; ++s) {
                const double dscore = w[s] * (dw[s] - dot) * inv_sqrt_d;
                if (dscore == 0.0) continue;
                const double* krow = &nodes_[ks[s]].value.data[i * d];
                const double* qi = &nodes_[q].value.data[i * d];
                for (std::size_t j = 0; j < d; ++j) {
                    nodes_[q].grad.data[i * d + j] += dscore * krow[j];
                    nodes_[ks[s]].grad.data[i * d + j] += dscore * qi[j];
                }
            }
        }
    };
    return o;
}

Var Tape::multihead_temporal_attention(Var q, const std::vector<Var>& keys,
                                       const std::vector<Var>& values, std::size_t heads,
                                       double drop_rate, std::mt19937_64* rng, bool training,
                                       AttentionCapture* capture) {
    if (keys.empty() || keys.size() != values.size())
        throw std::invalid_argument("multihead_temporal_attention: empty or mismatched context");
    const Tensor& Q = nodes_[q].value;
    const std::size_t n = Q.rows(), hd = Q.cols();
    if (heads == 0 || hd % heads != 0)
        throw std::invalid_argument("multihead_temporal_attention: bad head count");
    const std::size_t d = hd / heads;
    const std::size_t nq = keys.size();
    for (std::size_t s = 0; s < nq; ++s) {
        if (nodes_[keys[s]].value.rows() != n || nodes_[keys[s]].value.cols() != hd)
            shape_error("multihead_temporal_attention", Q, nodes_[keys[s]].value);
        if (nodes_[values[s]].value.rows() != n)
            shape_error("multihead_temporal_attention", Q, nodes_[values[s]].value);
    }
    const std::size_t dv = nodes_[values[0]].value.cols();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const bool drop = training && drop_rate > 0.0 && rng != nullptr;
    const double keep = 1.0 - drop_rate;

    // weights[(i*heads + h)*nq + s]
    auto weights = std::make_shared<Tensor::Buffer>(n * heads * nq);
    auto masks = std::make_shared<Tensor::Buffer>(drop ? n * heads * nq : 0);
    Tensor out({n, heads * dv});
    for (std::size_t i = 0; i < n; ++i) {
        const double* qi = &Q.data[i * hd];
        for (std::size_t h = 0; h < heads; ++h) {
            double* w = &(*weights)[(i * heads + h) * nq];
            const double* qh = qi + h * d;
            double mx = -1e300;
            for (std::size_t s = 0; s < nq; ++s) {
                const double* ks = &nodes_[keys[s]].value.data[i * hd + h * d];
                w[s] = dot_d(qh, ks, d) * inv_sqrt_d;
                mx = std::max(mx, w[s]);
            }
            for (std::size_t s = 0; s < nq; ++s) w[s] -= mx;
        }
        exp_inplace(&(*weights)[i * heads * nq], heads * nq);
        for (std::size_t h = 0; h < heads; ++h) {
            double* w = &(*weights)[(i * heads + h) * nq];
            double sum = 0.0;
            for (std::size_t s = 0; s < nq; ++s) sum += w[s];
            for (std::size_t s = 0; s < nq; ++s) w[s] /= sum;
            if (capture)
                for (std::size_t s = 0; s < nq; ++s)
                    capture->dlm.push_back({static_cast<int>(h), i, s, w[s]});
            double* oh = &out.data[i * heads * dv + h * dv];
            for (std::size_t s = 0; s < nq; ++s) {
                double eff = w[s];
                if (drop) {
                    double& m = (*masks)[(i * heads + h) * nq + s];
                    m = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
                    eff *= m;
                }
                if (eff == 0.0) continue;
                axpy_d(oh, eff, &nodes_[values[s]].value.data[i * dv], dv);
            }
        }
    }
    Var o = push(std::move(out));
    std::vector<Var> ks = keys, vs = values;
    nodes_[o].back = [this, q, ks, vs, o, n, heads, d, hd, dv, inv_sqrt_d, weights, masks, drop] {
        const Tensor& G = nodes_[o].grad;
        const std::size_t nq = ks.size();
        std::vector<double> dw(nq);
        for (std::size_t i = 0; i < n; ++i) {
            const double* qi = &nodes_[q].value.data[i * hd];
            double* dqi = &nodes_[q].grad.data[i * hd];
            for (std::size_t h = 0; h < heads; ++h) {
                const double* w = &(*weights)[(i * heads + h) * nq];
                const double* gh = &G.data[i * heads * dv + h * dv];
                for (std::size_t s = 0; s < nq; ++s) {
                    const double m = drop ? (*masks)[(i * heads + h) * nq + s] : 1.0;
                    const double* vrow = &nodes_[vs[s]].value.data[i * dv];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dv; ++j) acc += gh[j] * vrow[j];
                    dw[s] = acc * m;
                    const double wm = w[s] * m;
                    if (wm != 0.0) {
                        double* dvrow = &nodes_[vs[s]].grad.data[i * dv];
                        for (std::size_t j = 0; j < dv; ++j) dvrow[j] += wm * gh[j];
                    }
                }
                double dot = 0.0;
                for (std::size_t s = 0; s < nq; ++s) dot += dw[s] * w[s];
                const double* qh = qi + h * d;
                double* dqh = dqi + h * d;
                for (std::size_t s = 0; s < nq; ++s) {
                    const double dscore = w[s] * (dw[s] - dot) * inv_sqrt_d;
                    if (dscore == 0.0) continue;
                    const double* krow = &nodes_[ks[s]].value.data[i * hd + h * d];
                    double* dkrow = &nodes_[ks[s]].grad.data[i * hd + h * d];
                    for (std::size_t j = 0; j < d; ++j) {
                        dqh[j] += dscore * krow[j];
                        dkrow[j] += dscore * qh[j];
                    }
                }
            }
        }
    };
    return o;
}

Var Tape::blockdiag(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("blockdiag: no blocks");
    std::size_t total = 0;
    for (Var p : parts) {
        const Tensor& T = nodes_[p].value;
        if (T.shape.size() != 2 || T.shape[0] != T.shape[1]) shape_error("blockdiag", T, T);
        total += T.shape[0];
    }
    Tensor out({total, total});
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& T = nodes_[p].value;
        const std::size_t c = T.shape[0];
        for (std::size_t i = 0; i < c; ++i)
            std::memcpy(&out.data[(off + i) * total + off], &T.data[i * c], c * sizeof(double));
        off += c;
    }
    Var o = push(std::move(out));
    std::vector<Var> ps = parts;
    nodes_[o].back = [this, ps, o, total] {
        const Tensor& G = nodes_[o].grad;
        std::size_t off = 0;
        for (Var p : ps) {
            Tensor& dP = nodes_[p].grad;
            const std::size_t c = nodes_[p].value.shape[0];
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    dP.data[i * c + j] += G.data[(off + i) * total + off + j];
            off += c;
        }
    };
    return o;
}

void Tape::backward_local(Var loss) {
    if (!nodes_[loss].value.is_scalar())
        throw std::invalid_argument("backward: loss must be scalar");
    for (auto& node : nodes_)
        if (node.grad.size() != node.value.size())
            node.grad = Tensor::zeros(node.value.shape);
    nodes_[loss].grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;)
        if (nodes_[i].back) nodes_[i].back();
}

void Tape::flush_param_grads() {
    for (auto& [var, p] : bindings_) {
        const Tensor& g = nodes_[var].grad;
        for (std::size_t i = 0; i < g.size(); ++i) p->grad.data[i] += g.data[i];
    }
    for (ParameterStore* s : stores_) s->mark_grads_ready();
}

void Tape::backward(Var loss) {
    backward_local(loss);
    flush_param_grads();
}

double finite_diff_check(const std::function<Var(Tape&)>& fn, ParameterStore& store, double eps) {
    auto eval = [&]() {
        Tape t;
        Var v = fn(t);
        return t.value(v).data[0];
    };
    const double base1 = eval();
    const double base2 = eval();
    if (base1 != base2)
        throw std::runtime_error("finite_diff_check: fn is nondeterministic (is dropout on?)");

    store.zero_grad();
    {
        Tape t;
        Var loss = fn(t);
        t.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& p : store.params())
        analytic.emplace_back(p.grad.data.begin(), p.grad.data.end());

    double max_rel = 0.0;
    std::size_t pi = 0;
    for (auto& p : store.params()) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data[i];
            p.value.data[i] = orig + eps;
            const double up = eval();
            p.value.data[i] = orig - eps;
            const double dn = eval();
            p.value.data[i] = orig;
            const double numeric = (up - dn) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
        }
        ++pi;
    }
    store.zero_grad();
    return max_rel;
}

}  // namespace sttis
