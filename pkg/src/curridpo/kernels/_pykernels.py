"""Pure numpy implementation of the token-model kernels.

Layout shared with the compiled backend: a batch of ``n`` (prompt, response)
sequences is passed as two CSR-style pairs ``(ids, ptr)``; ``n_scored[i]`` is
the number of leading response positions that contribute to sequence ``i``'s
log-probability. The context vector at a response position is
``E[prev] + mean(E[prompt])`` where ``prev`` is the preceding response token,
or for the first position the last prompt token (BOS for an empty prompt).
"""
from __future__ import annotations

import numpy as np

BOS = 0
EOS = 1


def _contexts(E, x, y, L):
    d = E.shape[1]
    c = E[x].mean(axis=0) if len(x) else np.zeros(d)
    prev = np.empty(L, dtype=np.int64)
    prev[0] = x[-1] if len(x) else BOS
    prev[1:] = y[: L - 1]
    return prev, E[prev] + c


def seq_logprobs(E, U, prompt_ids, prompt_ptr, resp_ids, resp_ptr, n_scored):
    n = len(prompt_ptr) - 1
    out = np.zeros(n)
    for i in range(n):
        L = int(n_scored[i])
        if L == 0:
            continue
        x = prompt_ids[prompt_ptr[i] : prompt_ptr[i + 1]]
        y = resp_ids[resp_ptr[i] : resp_ptr[i + 1]]
        _, H = _contexts(E, x, y, L)
        Z = H @ U.T
        zmax = Z.max(axis=1)
        lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
        out[i] = (Z[np.arange(L), y[:L]] - lse).sum()
    return out


def seq_logprobs_grad(E, U, prompt_ids, prompt_ptr, resp_ids, resp_ptr, n_scored, weights):
    """Log-probs plus ``sum_i weights[i] * grad(logp_i)`` as ``(logps, dE, dU)``."""
    n = len(prompt_ptr) - 1
    out = np.zeros(n)
    dE = np.zeros_like(E)
    dU = np.zeros_like(U)
    for i in range(n):
        L = int(n_scored[i])
        if L == 0:
            continue
        x = prompt_ids[prompt_ptr[i] : prompt_ptr[i + 1]]
        y = resp_ids[resp_ptr[i] : resp_ptr[i + 1]]
        prev, H = _contexts(E, x, y, L)
        Z = H @ U.T
        zmax = Z.max(axis=1)
        lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
        rows = np.arange(L)
        tgt = y[:L]
        out[i] = (Z[rows, tgt] - lse).sum()
        w = weights[i]
        if w == 0.0:
            continue
        G = -np.exp(Z - lse[:, None])
        G[rows, tgt] += 1.0
        G *= w
        dU += G.T @ H
        GH = G @ U
        np.add.at(dE, prev, GH)
        if len(x):
            np.add.at(dE, x, GH.sum(axis=0) / len(x))
    return out, dE, dU


def sample_tokens(E, U, prompt_ids, uniforms):
    """Ancestral sampling by inverse CDF, one uniform per position; stops after EOS."""
    x = np.asarray(prompt_ids)
    d = E.shape[1]
    c = E[x].mean(axis=0) if len(x) else np.zeros(d)
    prev = int(x[-1]) if len(x) else BOS
    out = []
    for u in uniforms:
        z = U @ (E[prev] + c)
        p = np.exp(z - z.max())
        cdf = np.cumsum(p)
        tok = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        tok = min(tok, len(cdf) - 1)
        out.append(tok)
        if tok == EOS:
            break
        prev = tok
    return np.asarray(out, dtype=np.int64)
