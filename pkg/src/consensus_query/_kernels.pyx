# cython: language_level=3
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport M_PI, cos, exp, fabs, isfinite, log, log1p, sin, sqrt, tanh
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal, random_standard_uniform

cnp.import_array()

ctypedef cnp.int64_t i64

cdef double LOG_HALFNORM_CONST = 0.5 * log(2.0 / M_PI)
cdef double LOG2 = log(2.0)


cdef bitgen_t* _bitgen(object rng) except NULL:
    capsule = rng.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("rng does not expose a BitGenerator capsule")
    return <bitgen_t*> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef inline double _log_cosh(double y) noexcept nogil:
    cdef double a = fabs(y)
    return a + log1p(exp(-2.0 * a)) - LOG2


cdef inline i64 _pick_mode(i64* counts, int K, double u) noexcept nogil:
    cdef i64 best = -1, n_ties = 0, pick, k, seen = 0
    for k in range(K):
        if counts[k] > best:
            best = counts[k]
            n_ties = 1
        elif counts[k] == best:
            n_ties += 1
    pick = <i64>(u * n_ties)
    if pick >= n_ties:
        pick = n_ties - 1
    for k in range(K):
        if counts[k] == best:
            if seen == pick:
                return k
            seen += 1
    return K - 1


def aggregate_batch(const i64[:, :] votes, int kind, int positive, int K, const double[:] u):
    cdef Py_ssize_t n = votes.shape[0], H = votes.shape[1], s, h
    cdef cnp.ndarray[i64, ndim=1] out_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] out = out_arr
    cdef cnp.ndarray[i64, ndim=1] counts_arr = np.zeros(max(K, 1), dtype=np.int64)
    cdef i64* counts = <i64*> counts_arr.data
    cdef bint hit
    with nogil:
        for s in range(n):
            if kind == 1:
                hit = False
                for h in range(H):
                    if votes[s, h] == positive:
                        hit = True
                        break
                out[s] = positive if hit else 1 - positive
            elif kind == 2:
                hit = True
                for h in range(H):
                    if votes[s, h] != positive:
                        hit = False
                        break
                out[s] = positive if hit else 1 - positive
            else:
                for h in range(K):
                    counts[h] = 0
                for h in range(H):
                    counts[votes[s, h]] += 1
                out[s] = _pick_mode(counts, K, u[s])
    return out_arr


def categorical_draw(const double[:, :, :] probs, const double[:, :] u):
    cdef Py_ssize_t n = probs.shape[0], H = probs.shape[1], K = probs.shape[2], s, h, k
    cdef cnp.ndarray[i64, ndim=2] out_arr = np.empty((n, H), dtype=np.int64)
    cdef i64[:, ::1] out = out_arr
    cdef double acc
    with nogil:
        for s in range(n):
            for h in range(H):
                acc = 0.0
                out[s, h] = K - 1
                for k in range(K):
                    acc += probs[s, h, k]
                    if acc > u[s, h]:
                        out[s, h] = k
                        break
    return out_arr


def subset_error_count(const i64[:, :] votes, int K, int n_q, i64 trials, object rng):
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t T = votes.shape[0], H = votes.shape[1]
    cdef cnp.ndarray[i64, ndim=1] idx_arr = np.arange(H, dtype=np.int64)
    cdef cnp.ndarray[i64, ndim=1] sub_arr = np.zeros(K, dtype=np.int64)
    cdef cnp.ndarray[i64, ndim=1] pan_arr = np.zeros(K, dtype=np.int64)
    cdef i64* idx = <i64*> idx_arr.data
    cdef i64* sub = <i64*> sub_arr.data
    cdef i64* pan = <i64*> pan_arr.data
    cdef i64 trial, errors = 0, r, j, s, tmp, k, a, b
    with rng.bit_generator.lock:
        with nogil:
            for trial in range(trials):
                r = <i64>(random_standard_uniform(bg) * T)
                if r >= T:
                    r = T - 1
                for k in range(K):
                    sub[k] = 0
                    pan[k] = 0
                for j in range(H):
                    pan[votes[r, j]] += 1
                for j in range(n_q):
                    s = j + <i64>(random_standard_uniform(bg) * (H - j))
                    if s >= H:
                        s = H - 1
                    tmp = idx[j]
                    idx[j] = idx[s]
                    idx[s] = tmp
                    sub[votes[r, idx[j]]] += 1
                a = _pick_mode(sub, K, random_standard_uniform(bg))
                b = _pick_mode(pan, K, random_standard_uniform(bg))
                if a != b:
                    errors += 1
    return errors


cdef double _rec_ll(const double* x, const i64* v, int H, int K, double tau) noexcept nogil:
    return _rec_ll_range(x, v, 0, H, K, tau)


cdef double _rec_ll_range(const double* x, const i64* v, int h0, int h1, int K, double tau) noexcept nogil:
    cdef double ll = 0.0, m, s, a
    cdef int i, k, km1 = K - 1
    for i in range(h0, h1):
        if v[i] < 0:
            continue
        m = 0.0
        for k in range(km1):
            a = x[i * km1 + k] / tau
            if a > m:
                m = a
        s = exp(-m)
        for k in range(km1):
            s += exp(x[i * km1 + k] / tau - m)
        if v[i] == km1:
            ll += -m - log(s)
        else:
            ll += x[i * km1 + v[i]] / tau - m - log(s)
    return ll


def vote_loglik(const double[:, :, ::1] Z, const i64[:, ::1] votes, const double[::1] tau, int K, int expert=-1):
    cdef Py_ssize_t C = Z.shape[0], T = Z.shape[1], c, t
    cdef int H = votes.shape[1]
    cdef int h0 = 0, h1 = H
    if expert >= 0:
        h0 = expert
        h1 = expert + 1
    out_arr = np.zeros(C)
    cdef double[::1] out = out_arr
    cdef double acc
    if T == 0:
        return out_arr
    with nogil:
        for c in range(C):
            acc = 0.0
            for t in range(T):
                acc += _rec_ll_range(&Z[c, t, 0], &votes[t, 0], h0, h1, K, tau[c])
            out[c] = acc
    return out_arr


def ess_update(double[:, :, ::1] Z, const double[:, :, ::1] prior_mean, const double[:, :, ::1] chol,
               const i64[:, ::1] votes, const double[::1] tau, int K, object rng):
    """Elliptical slice sampling of every record's expert logits, in place."""
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t C = Z.shape[0], T = Z.shape[1], dH = Z.shape[2]
    cdef int H = votes.shape[1]
    cdef Py_ssize_t c, t, i, j, it
    cdef cnp.ndarray[double, ndim=1] eps_arr = np.empty(max(dH, 1))
    cdef cnp.ndarray[double, ndim=1] nu_arr = np.empty(max(dH, 1))
    cdef cnp.ndarray[double, ndim=1] prop_arr = np.empty(max(dH, 1))
    cdef double* eps = <double*> eps_arr.data
    cdef double* nu = <double*> nu_arr.data
    cdef double* prop = <double*> prop_arr.data
    cdef double logy, theta, lo, hi, ll, ct, st, acc
    cdef bint has_obs
    cdef i64 evals = 0
    if T == 0:
        return 0
    with rng.bit_generator.lock:
        with nogil:
            for c in range(C):
                for t in range(T):
                    for i in range(dH):
                        eps[i] = random_standard_normal(bg)
                    for i in range(dH):
                        acc = prior_mean[c, t, i]
                        for j in range(i + 1):
                            acc = acc + chol[c, i, j] * eps[j]
                        nu[i] = acc
                    has_obs = False
                    for i in range(H):
                        if votes[t, i] >= 0:
                            has_obs = True
                            break
                    if not has_obs:
                        for i in range(dH):
                            Z[c, t, i] = nu[i]
                        continue
                    logy = _rec_ll(&Z[c, t, 0], &votes[t, 0], H, K, tau[c]) + log(random_standard_uniform(bg))
                    theta = 2.0 * M_PI * random_standard_uniform(bg)
                    lo = theta - 2.0 * M_PI
                    hi = theta
                    for it in range(200):
                        ct = cos(theta)
                        st = sin(theta)
                        for i in range(dH):
                            prop[i] = prior_mean[c, t, i] + (Z[c, t, i] - prior_mean[c, t, i]) * ct \
                                + (nu[i] - prior_mean[c, t, i]) * st
                        ll = _rec_ll(prop, &votes[t, 0], H, K, tau[c])
                        evals += 1
                        if ll > logy:
                            for i in range(dH):
                                Z[c, t, i] = prop[i]
                            break
                        if theta < 0:
                            lo = theta
                        else:
                            hi = theta
                        theta = lo + (hi - lo) * random_standard_uniform(bg)
    return evals


cdef double _cov_lp_grad(const double* pos, const double* S, int d, double n, double eta, double ss,
                         const double* coef, double* grad, double* ws) noexcept nogil:
    cdef int P = d * (d - 1) // 2
    cdef double* L = ws
    cdef double* Ls = ws + d * d
    cdef double* B = ws + 2 * d * d
    cdef double* BS = ws + 3 * d * d
    cdef double* R = ws + 4 * d * d
    cdef double* G = ws + 5 * d * d
    cdef double* sig = ws + 6 * d * d
    cdef double* z = sig + d
    cdef double* w = z + P
    cdef int i, j, k, idx
    cdef double acc, lc, yk, lp = 0.0, lp_y = 0.0, trace = 0.0, s, suf, gl
    for i in range(d):
        sig[i] = exp(pos[i])
    for i in range(d * d):
        L[i] = 0.0
    L[0] = 1.0
    idx = 0
    for i in range(1, d):
        acc = 0.0
        for k in range(i):
            yk = pos[d + idx]
            z[idx] = tanh(yk)
            lc = -_log_cosh(yk)
            w[idx] = exp(acc)
            L[i * d + k] = z[idx] * w[idx]
            acc += lc
            lp_y += coef[idx] * lc
            idx += 1
        L[i * d + i] = exp(acc)
    for i in range(d):
        for j in range(d):
            Ls[i * d + j] = sig[i] * L[i * d + j]
            B[i * d + j] = 0.0
    # B = Ls^{-1}, lower triangular
    for j in range(d):
        B[j * d + j] = 1.0 / Ls[j * d + j]
        for i in range(j + 1, d):
            s = 0.0
            for k in range(j, i):
                s += Ls[i * d + k] * B[k * d + j]
            B[i * d + j] = -s / Ls[i * d + i]
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(i + 1):
                s += B[i * d + k] * S[k * d + j]
            BS[i * d + j] = s
    for i in range(d):
        for j in range(i + 1):
            trace += BS[i * d + j] * B[i * d + j]
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(j + 1):
                s += BS[i * d + k] * B[j * d + k]
            R[i * d + j] = s
    for i in range(d):
        for j in range(i + 1):
            s = 0.0
            for k in range(i, d):
                s += B[k * d + i] * R[k * d + j]
            G[i * d + j] = s
        G[i * d + i] -= n / Ls[i * d + i]
    lp = -0.5 * trace + lp_y
    for i in range(d):
        lp += -n * log(Ls[i * d + i])
        lp += LOG_HALFNORM_CONST - log(ss) - 0.5 * (sig[i] / ss) * (sig[i] / ss) + pos[i]
        s = 0.0
        for j in range(i + 1):
            s += G[i * d + j] * L[i * d + j]
        grad[i] = sig[i] * s - (sig[i] / ss) * (sig[i] / ss) + 1.0
    # gL = sig_i * G, pulled back row by row to the CPC coordinates
    idx = 0
    for i in range(1, d):
        suf = 0.0
        # entries are visited from the diagonal downwards to accumulate suffix sums
        for k in range(i, -1, -1):
            gl = sig[i] * G[i * d + k]
            if k < i:
                grad[d + idx + k] = gl * (1.0 - z[idx + k] * z[idx + k]) * w[idx + k] \
                    - z[idx + k] * suf - coef[idx + k] * z[idx + k]
            suf += gl * L[i * d + k]
        idx += i
    return lp


def _coef(int d, double eta):
    cdef int P = d * (d - 1) // 2, i, k, idx = 0
    out = np.zeros(max(P, 1))
    for i in range(1, d):
        for k in range(i):
            out[idx] = (d - i - 1 + 2.0 * eta - 2.0) + max(i - 1 - k, 0) + 2.0
            idx += 1
    return out


def cov_logp_grad(const double[::1] pos, const double[:, ::1] S, double n, double eta, double sigma_sigma):
    cdef int d = S.shape[0]
    cdef int P = d * (d - 1) // 2
    cdef cnp.ndarray[double, ndim=1] coef = _coef(d, eta)
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(d + P)
    cdef cnp.ndarray[double, ndim=1] ws = np.zeros(6 * d * d + d + 2 * P + 1)
    cdef double lp = _cov_lp_grad(&pos[0], &S[0, 0], d, n, eta, sigma_sigma,
                                  <double*> coef.data, <double*> grad.data, <double*> ws.data)
    return lp, grad


def cov_hmc(const double[:, ::1] pos, const double[:, :, ::1] S, double n, double eta, double sigma_sigma,
            const double[::1] step, const double[:, ::1] inv_mass, int n_leap, object rng):
    """One HMC transition per chain for the covariance block."""
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t C = pos.shape[0], P = pos.shape[1], c, i
    cdef int d = S.shape[1]
    cdef int np_ = d * (d - 1) // 2
    cdef cnp.ndarray[double, ndim=1] coef_arr = _coef(d, eta)
    cdef cnp.ndarray[double, ndim=2] out_arr = np.array(pos, dtype=float)
    acc_arr = np.zeros(C)
    lps_arr = np.zeros(C)
    cdef double[::1] acc_v = acc_arr
    cdef double[::1] lps_v = lps_arr
    cdef cnp.ndarray[double, ndim=1] x_arr = np.zeros(P)
    cdef cnp.ndarray[double, ndim=1] p_arr = np.zeros(P)
    cdef cnp.ndarray[double, ndim=1] g_arr = np.zeros(P)
    cdef cnp.ndarray[double, ndim=1] ws_arr = np.zeros(6 * d * d + d + 2 * np_ + 1)
    cdef double* coef = <double*> coef_arr.data
    cdef double[:, ::1] out = out_arr
    cdef double* x = <double*> x_arr.data
    cdef double* p = <double*> p_arr.data
    cdef double* g = <double*> g_arr.data
    cdef double* ws = <double*> ws_arr.data
    cdef double lp0, lp, h0, h1, eps, a, u, kin
    cdef int it
    cdef bint ok
    with rng.bit_generator.lock:
        with nogil:
            for c in range(C):
                for i in range(P):
                    x[i] = pos[c, i]
                lp0 = _cov_lp_grad(x, &S[c, 0, 0], d, n, eta, sigma_sigma, coef, g, ws)
                kin = 0.0
                for i in range(P):
                    p[i] = random_standard_normal(bg) / sqrt(inv_mass[c, i])
                    kin += inv_mass[c, i] * p[i] * p[i]
                h0 = lp0 - 0.5 * kin
                eps = step[c]
                lp = lp0
                ok = isfinite(lp0)
                for it in range(n_leap):
                    if not ok:
                        break
                    for i in range(P):
                        p[i] += 0.5 * eps * g[i]
                        x[i] += eps * inv_mass[c, i] * p[i]
                    lp = _cov_lp_grad(x, &S[c, 0, 0], d, n, eta, sigma_sigma, coef, g, ws)
                    if not isfinite(lp):
                        ok = False
                        break
                    for i in range(P):
                        p[i] += 0.5 * eps * g[i]
                u = random_standard_uniform(bg)
                a = 0.0
                if ok:
                    kin = 0.0
                    for i in range(P):
                        kin += inv_mass[c, i] * p[i] * p[i]
                    h1 = lp - 0.5 * kin
                    if h1 >= h0:
                        a = 1.0
                    else:
                        a = exp(h1 - h0)
                    if not isfinite(a):
                        a = 0.0
                acc_v[c] = a
                if u < a:
                    for i in range(P):
                        out[c, i] = x[i]
                    lps_v[c] = lp
                else:
                    lps_v[c] = lp0
    return out_arr, acc_arr, lps_arr


cdef double _ncp_lp_grad(const double* th, const double* zM, const i64* votes, int T, int dM, int dH, int H, int K,
                         double eta, double s_mu, double s_sig, double s_tau, const double* coef,
                         double* grad, double* ws) noexcept nogil:
    """Non-centred joint log density (constants dropped) and its gradient.

    ``th`` = (mu, log sigma, CPCs, log tau, eps_H for every record).
    """
    cdef int d = dM + dH
    cdef int P = d * (d - 1) // 2
    cdef int k1 = K - 1
    cdef int Q = 2 * d + P + 1 + T * dH
    cdef double* L = ws
    cdef double* Ls = L + d * d
    cdef double* gLs = Ls + d * d
    cdef double* B1 = gLs + d * d
    cdef double* sig = B1 + d * d
    cdef double* A1 = sig + d
    cdef double* epsM = A1 + d
    cdef double* geM = epsM + d
    cdef double* zH = geM + d
    cdef double* G = zH + d
    cdef double* z = G + d
    cdef double* w = z + P + 1
    cdef double* ex = w + P + 1
    cdef const double* mu = th
    cdef const double* logsig = th + d
    cdef const double* y = th + 2 * d
    cdef double logtau = th[2 * d + P]
    cdef double tau = exp(logtau)
    cdef double itau = 1.0 / tau
    cdef const double* epsH
    cdef double* gepsH
    cdef int i, j, k, t, h, idx, v
    cdef double acc, lc, yk, lp = 0.0, s, m, a, e, tot, suf, gl, dlogtau = 0.0, r
    for i in range(Q):
        grad[i] = 0.0
    for i in range(d * d):
        L[i] = 0.0
        gLs[i] = 0.0
        B1[i] = 0.0
    for i in range(d):
        sig[i] = exp(logsig[i])
        A1[i] = 0.0
    L[0] = 1.0
    idx = 0
    for i in range(1, d):
        acc = 0.0
        for k in range(i):
            yk = y[idx]
            z[idx] = tanh(yk)
            lc = -_log_cosh(yk)
            w[idx] = exp(acc)
            L[i * d + k] = z[idx] * w[idx]
            acc += lc
            lp += coef[idx] * lc
            idx += 1
        L[i * d + i] = exp(acc)
    for i in range(d):
        for j in range(i + 1):
            Ls[i * d + j] = sig[i] * L[i * d + j]
    for t in range(T):
        # eps_M = L_MM^{-1} (z_M - mu_M)
        for i in range(dM):
            s = zM[t * dM + i] - mu[i]
            for j in range(i):
                s -= Ls[i * d + j] * epsM[j]
            epsM[i] = s / Ls[i * d + i]
            lp -= 0.5 * epsM[i] * epsM[i]
        epsH = th + 2 * d + P + 1 + t * dH
        gepsH = grad + 2 * d + P + 1 + t * dH
        for i in range(dH):
            s = mu[dM + i]
            for j in range(dM):
                s += Ls[(dM + i) * d + j] * epsM[j]
            for j in range(i + 1):
                s += Ls[(dM + i) * d + dM + j] * epsH[j]
            zH[i] = s
            lp -= 0.5 * epsH[i] * epsH[i]
        for h in range(H):
            v = votes[t * H + h]
            if v < 0:
                for k in range(k1):
                    G[h * k1 + k] = 0.0
                continue
            m = 0.0
            for k in range(k1):
                a = zH[h * k1 + k] * itau
                ex[k] = a
                if a > m:
                    m = a
            tot = exp(-m)
            for k in range(k1):
                e = exp(ex[k] - m)
                G[h * k1 + k] = e
                tot += e
            lp -= m + log(tot)
            if v < k1:
                lp += ex[v]
            for k in range(k1):
                r = (1.0 if k == v else 0.0) - G[h * k1 + k] / tot
                G[h * k1 + k] = r * itau
                dlogtau -= r * ex[k]
        for i in range(dH):
            grad[dM + i] += G[i]
        # eps_H gradient: L_HH^T G - eps_H ; L_HH / L_HM gradients
        for j in range(dH):
            s = -epsH[j]
            for i in range(j, dH):
                s += Ls[(dM + i) * d + dM + j] * G[i]
                gLs[(dM + i) * d + dM + j] += G[i] * epsH[j]
            gepsH[j] = s
        for j in range(dM):
            s = -epsM[j]
            for i in range(dH):
                s += Ls[(dM + i) * d + j] * G[i]
                gLs[(dM + i) * d + j] += G[i] * epsM[j]
            geM[j] = s
            A1[j] += s
        for i in range(dM):
            for j in range(dM):
                B1[i * d + j] += geM[i] * epsM[j]
    # classifier block: eps_M depends on mu_M and L_MM through a triangular solve
    if dM > 0:
        # solve L_MM^T x = A1 (back substitution), grad mu_M -= x
        for i in range(dM - 1, -1, -1):
            s = A1[i]
            for j in range(i + 1, dM):
                s -= Ls[j * d + i] * epsM[j]
            epsM[i] = s / Ls[i * d + i]
        for i in range(dM):
            grad[i] -= epsM[i]
        # gLs_MM = -tril(L_MM^{-T} B1), one column of B1 at a time
        for k in range(dM):
            for i in range(dM - 1, -1, -1):
                s = B1[i * d + k]
                for j in range(i + 1, dM):
                    s -= Ls[j * d + i] * zH[j]
                zH[i] = s / Ls[i * d + i]
            for i in range(k, dM):
                gLs[i * d + k] -= zH[i]
        for i in range(dM):
            lp -= T * log(Ls[i * d + i])
            gLs[i * d + i] -= T / Ls[i * d + i]
    for i in range(d):
        lp += -0.5 * (mu[i] / s_mu) * (mu[i] / s_mu)
        grad[i] -= mu[i] / (s_mu * s_mu)
        lp += -0.5 * (sig[i] / s_sig) * (sig[i] / s_sig) + logsig[i]
        s = 0.0
        for j in range(i + 1):
            s += gLs[i * d + j] * L[i * d + j]
        grad[d + i] = sig[i] * s - (sig[i] / s_sig) * (sig[i] / s_sig) + 1.0
    idx = 0
    for i in range(1, d):
        suf = 0.0
        for k in range(i, -1, -1):
            gl = sig[i] * gLs[i * d + k]
            if k < i:
                grad[2 * d + idx + k] = gl * (1.0 - z[idx + k] * z[idx + k]) * w[idx + k] \
                    - z[idx + k] * suf - coef[idx + k] * z[idx + k]
            suf += gl * L[i * d + k]
        idx += i
    lp += -0.5 * (tau / s_tau) * (tau / s_tau) + logtau
    grad[2 * d + P] = dlogtau - (tau / s_tau) * (tau / s_tau) + 1.0
    return lp


cdef inline int _ncp_ws_size(int d):
    return 4 * d * d + 7 * d + 2 * (d * (d - 1) // 2) + 2


def ncp_logp_grad(const double[::1] theta, const double[:, ::1] zM, const i64[:, ::1] votes, int K,
                  double eta, double sigma_mu, double sigma_sigma, double sigma_tau):
    cdef int T = votes.shape[0], H = votes.shape[1], dM = zM.shape[1]
    cdef int dH = H * (K - 1), d = dM + dH
    cdef cnp.ndarray[double, ndim=1] coef = _coef(d, eta)
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(theta.shape[0])
    cdef cnp.ndarray[double, ndim=1] ws = np.zeros(_ncp_ws_size(d))
    cdef const double* zp = &zM[0, 0] if T > 0 and dM > 0 else NULL
    cdef const i64* vp = &votes[0, 0] if T > 0 else NULL
    lp = _ncp_lp_grad(&theta[0], zp, vp, T, dM, dH, H, K, eta, sigma_mu, sigma_sigma, sigma_tau,
                      <double*> coef.data, <double*> grad.data, <double*> ws.data)
    return lp, grad


def ncp_hmc(const double[:, ::1] theta, const double[:, ::1] zM, const i64[:, ::1] votes, int K,
            double eta, double sigma_mu, double sigma_sigma, double sigma_tau,
            const double[::1] step, const double[:, ::1] inv_mass, int n_leap, object rng):
    """One HMC transition per chain on the joint non-centred parameterisation."""
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t C = theta.shape[0], Q = theta.shape[1], c, i
    cdef int T = votes.shape[0], H = votes.shape[1], dM = zM.shape[1]
    cdef int dH = H * (K - 1), d = dM + dH
    cdef cnp.ndarray[double, ndim=1] coef_arr = _coef(d, eta)
    cdef cnp.ndarray[double, ndim=2] out_arr = np.array(theta, dtype=float)
    acc_arr = np.zeros(C)
    lps_arr = np.zeros(C)
    cdef double[::1] acc_v = acc_arr
    cdef double[::1] lps_v = lps_arr
    cdef cnp.ndarray[double, ndim=1] x_arr = np.zeros(Q)
    cdef cnp.ndarray[double, ndim=1] p_arr = np.zeros(Q)
    cdef cnp.ndarray[double, ndim=1] g_arr = np.zeros(Q)
    cdef cnp.ndarray[double, ndim=1] ws_arr = np.zeros(_ncp_ws_size(d))
    cdef double* coef = <double*> coef_arr.data
    cdef double[:, ::1] out = out_arr
    cdef double* x = <double*> x_arr.data
    cdef double* p = <double*> p_arr.data
    cdef double* g = <double*> g_arr.data
    cdef double* ws = <double*> ws_arr.data
    cdef const double* zp = &zM[0, 0] if T > 0 and dM > 0 else NULL
    cdef const i64* vp = &votes[0, 0] if T > 0 else NULL
    cdef double lp0, lp, h0, h1, eps, a, u, kin
    cdef int it
    cdef bint ok
    with rng.bit_generator.lock:
        with nogil:
            for c in range(C):
                for i in range(Q):
                    x[i] = theta[c, i]
                lp0 = _ncp_lp_grad(x, zp, vp, T, dM, dH, H, K, eta, sigma_mu, sigma_sigma, sigma_tau,
                                   coef, g, ws)
                kin = 0.0
                for i in range(Q):
                    p[i] = random_standard_normal(bg) / sqrt(inv_mass[c, i])
                    kin += inv_mass[c, i] * p[i] * p[i]
                h0 = lp0 - 0.5 * kin
                eps = step[c]
                lp = lp0
                ok = isfinite(lp0)
                for it in range(n_leap):
                    if not ok:
                        break
                    for i in range(Q):
                        p[i] += 0.5 * eps * g[i]
                        x[i] += eps * inv_mass[c, i] * p[i]
                    lp = _ncp_lp_grad(x, zp, vp, T, dM, dH, H, K, eta, sigma_mu, sigma_sigma, sigma_tau,
                                      coef, g, ws)
                    if not isfinite(lp):
                        ok = False
                        break
                    for i in range(Q):
                        p[i] += 0.5 * eps * g[i]
                u = random_standard_uniform(bg)
                a = 0.0
                if ok:
                    kin = 0.0
                    for i in range(Q):
                        kin += inv_mass[c, i] * p[i] * p[i]
                    h1 = lp - 0.5 * kin
                    if h1 >= h0:
                        a = 1.0
                    else:
                        a = exp(h1 - h0)
                    if not isfinite(a):
                        a = 0.0
                acc_v[c] = a
                if u < a:
                    for i in range(Q):
                        out[c, i] = x[i]
                    lps_v[c] = lp
                else:
                    lps_v[c] = lp0
    return out_arr, acc_arr, lps_arr
