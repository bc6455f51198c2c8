# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled token-model kernels. Same contract as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    BOS = 0
    EOS = 1


cdef void _context(const double[:, ::1] E, const long long[::1] x, Py_ssize_t x0,
                   Py_ssize_t x1, double* c) noexcept nogil:
    cdef Py_ssize_t d = E.shape[1], j, a
    for a in range(d):
        c[a] = 0.0
    if x1 <= x0:
        return
    for j in range(x0, x1):
        for a in range(d):
            c[a] += E[x[j], a]
    for a in range(d):
        c[a] /= (x1 - x0)


cdef double _position(const double[:, ::1] E, const double[:, ::1] U, long long prev,
                      long long tgt, const double* c, double* h, double* z) noexcept nogil:
    """Fill h and z (logits), turn z into probabilities, return log p(tgt)."""
    cdef Py_ssize_t V = U.shape[0], d = U.shape[1], v, a
    cdef double zmax, s, acc, lse
    for a in range(d):
        h[a] = E[prev, a] + c[a]
    zmax = -1e308
    for v in range(V):
        acc = 0.0
        for a in range(d):
            acc += U[v, a] * h[a]
        z[v] = acc
        if acc > zmax:
            zmax = acc
    s = 0.0
    for v in range(V):
        s += exp(z[v] - zmax)
    lse = zmax + log(s)
    acc = z[tgt] - lse
    for v in range(V):
        z[v] = exp(z[v] - lse)
    return acc


def seq_logprobs(const double[:, ::1] E, const double[:, ::1] U,
                 const long long[::1] prompt_ids, const long long[::1] prompt_ptr,
                 const long long[::1] resp_ids, const long long[::1] resp_ptr,
                 const long long[::1] n_scored):
    cdef Py_ssize_t n = prompt_ptr.shape[0] - 1, V = U.shape[0], d = U.shape[1]
    cdef Py_ssize_t i, t, L, r0
    cdef long long prev
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef double total
    cdef double* c = <double*> malloc(d * sizeof(double))
    cdef double* h = <double*> malloc(d * sizeof(double))
    cdef double* z = <double*> malloc(V * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                L = n_scored[i]
                if L == 0:
                    continue
                _context(E, prompt_ids, prompt_ptr[i], prompt_ptr[i + 1], c)
                r0 = resp_ptr[i]
                if prompt_ptr[i + 1] > prompt_ptr[i]:
                    prev = prompt_ids[prompt_ptr[i + 1] - 1]
                else:
                    prev = BOS
                total = 0.0
                for t in range(L):
                    total += _position(E, U, prev, resp_ids[r0 + t], c, h, z)
                    prev = resp_ids[r0 + t]
                out[i] = total
    finally:
        free(c)
        free(h)
        free(z)
    return out_arr


def seq_logprobs_grad(const double[:, ::1] E, const double[:, ::1] U,
                      const long long[::1] prompt_ids, const long long[::1] prompt_ptr,
                      const long long[::1] resp_ids, const long long[::1] resp_ptr,
                      const long long[::1] n_scored, const double[::1] weights):
    cdef Py_ssize_t n = prompt_ptr.shape[0] - 1, V = U.shape[0], d = U.shape[1]
    cdef Py_ssize_t i, t, L, r0, x0, x1, j, v, a
    cdef long long prev, tgt
    cdef double total, w, g, nx
    out_arr = np.zeros(n)
    dE_arr = np.zeros((E.shape[0], d))
    dU_arr = np.zeros((V, d))
    cdef double[::1] out = out_arr
    cdef double[:, ::1] dE = dE_arr
    cdef double[:, ::1] dU = dU_arr
    cdef double* c = <double*> malloc(d * sizeof(double))
    cdef double* h = <double*> malloc(d * sizeof(double))
    cdef double* gh = <double*> malloc(d * sizeof(double))
    cdef double* gc = <double*> malloc(d * sizeof(double))
    cdef double* z = <double*> malloc(V * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                L = n_scored[i]
                if L == 0:
                    continue
                x0 = prompt_ptr[i]
                x1 = prompt_ptr[i + 1]
                _context(E, prompt_ids, x0, x1, c)
                r0 = resp_ptr[i]
                prev = prompt_ids[x1 - 1] if x1 > x0 else BOS
                w = weights[i]
                for a in range(d):
                    gc[a] = 0.0
                total = 0.0
                for t in range(L):
                    tgt = resp_ids[r0 + t]
                    total += _position(E, U, prev, tgt, c, h, z)
                    if w != 0.0:
                        # z now holds probabilities; dlogp/dz = onehot(tgt) - p
                        for a in range(d):
                            gh[a] = 0.0
                        for v in range(V):
                            g = -z[v]
                            if v == tgt:
                                g += 1.0
                            g *= w
                            for a in range(d):
                                dU[v, a] += g * h[a]
                                gh[a] += g * U[v, a]
                        for a in range(d):
                            dE[prev, a] += gh[a]
                            gc[a] += gh[a]
                    prev = tgt
                out[i] = total
                if w != 0.0 and x1 > x0:
                    nx = <double>(x1 - x0)
                    for j in range(x0, x1):
                        for a in range(d):
                            dE[prompt_ids[j], a] += gc[a] / nx
    finally:
        free(c)
        free(h)
        free(gh)
        free(gc)
        free(z)
    return out_arr, dE_arr, dU_arr


def sample_tokens(const double[:, ::1] E, const double[:, ::1] U,
                  const long long[::1] prompt_ids, const double[::1] uniforms):
    cdef Py_ssize_t V = U.shape[0], d = U.shape[1], n = uniforms.shape[0]
    cdef Py_ssize_t t, v, a, count = 0, nx = prompt_ids.shape[0]
    cdef long long prev = prompt_ids[nx - 1] if nx > 0 else BOS
    cdef long long tok
    cdef double zmax, acc, total, target
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef double* c = <double*> malloc(d * sizeof(double))
    cdef double* h = <double*> malloc(d * sizeof(double))
    cdef double* z = <double*> malloc(V * sizeof(double))
    try:
        with nogil:
            _context(E, prompt_ids, 0, nx, c)
            for t in range(n):
                for a in range(d):
                    h[a] = E[prev, a] + c[a]
                zmax = -1e308
                for v in range(V):
                    acc = 0.0
                    for a in range(d):
                        acc += U[v, a] * h[a]
                    z[v] = acc
                    if acc > zmax:
                        zmax = acc
                total = 0.0
                for v in range(V):
                    z[v] = exp(z[v] - zmax)
                    total += z[v]
                target = uniforms[t] * total
                tok = V - 1
                acc = 0.0
                for v in range(V):
                    acc += z[v]
                    if acc > target:
                        tok = v
                        break
                out[count] = tok
                count += 1
                if tok == EOS:
                    break
                prev = tok
    finally:
        free(c)
        free(h)
        free(z)
    return out_arr[:count].copy()
