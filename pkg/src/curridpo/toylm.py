"""Compact autoregressive token models.

Two kinds share one interface:

* :class:`NeuralLM` -- next-token logits ``U @ (E[prev] + mean(E[prompt]))``.
  Differentiable; used for the SFT model, the policy and reference snapshots.
* :class:`BigramLM` -- frozen add-alpha bigram table; the external perplexity
  scorer.

Sequences are plain integer sequences. A response always ends with EOS and its
length counts that EOS. The first response token is conditioned on the last
prompt token (BOS when the prompt is empty).
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DataFormatError, InvalidInputError, UnsupportedOperationError

BOS, EOS, UNK = 0, 1, 2
SPECIAL_TOKENS = ("<bos>", "<eos>", "<unk>")
DEFAULT_MAX_LEN = 32
MODEL_FORMAT_VERSION = 1


class Vocab:
    """Ordered token list; indices 0-2 are BOS/EOS/UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIAL_TOKENS:
            raise InvalidInputError(f"vocab must start with {SPECIAL_TOKENS}, got {tokens[:3]}")
        if len(tokens) < 4:
            raise InvalidInputError("vocab needs at least one content token")
        if len(set(tokens)) != len(tokens):
            dupes = sorted({t for t in tokens if tokens.count(t) > 1})
            raise InvalidInputError(f"duplicate vocab tokens: {dupes}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocab":
        content = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls([*SPECIAL_TOKENS, *content])

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        try:
            return cls([ln.strip() for ln in lines if ln.strip()])
        except InvalidInputError as exc:
            raise DataFormatError(str(exc), path=path) from None

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def tokenize(text: str, vocab: Vocab, role: str = "response") -> tuple[int, ...]:
    """Whitespace tokenization; unknown words map to UNK, responses gain EOS."""
    ids = [vocab.index.get(w, UNK) for w in text.split()]
    if role == "response":
        ids.append(EOS)
    elif role != "prompt":
        raise InvalidInputError(f"role must be 'prompt' or 'response', not {role!r}")
    return tuple(ids)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    words = [vocab.tokens[i] for i in ids if i not in (BOS, EOS)]
    return " ".join(words)


class NeuralLM:
    """Embedding/output matrices stored in one flat float64 vector.

    ``params[:V*d]`` is E (row-major V x d), ``params[V*d:]`` is U.
    """

    kind = "neural"

    def __init__(self, vocab_size: int, dim: int, params=None, vocab_hash: str | None = None):
        if vocab_size < 4 or dim < 1:
            raise InvalidInputError(f"need vocab_size >= 4 and dim >= 1, got {vocab_size}, {dim}")
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.vocab_hash = vocab_hash
        n = 2 * self.vocab_size * self.dim
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.array(params, dtype=np.float64).reshape(-1)
            if params.shape != (n,):
                raise InvalidInputError(f"expected {n} parameters, got {params.size}")
            self.params = params

    @classmethod
    def random(cls, vocab_size: int, dim: int, seed: int, scale: float = 0.1, vocab_hash=None):
        rng = np.random.default_rng(seed)
        return cls(vocab_size, dim, rng.normal(0.0, scale, 2 * vocab_size * dim), vocab_hash)

    @property
    def E(self) -> np.ndarray:
        return self.params[: self.vocab_size * self.dim].reshape(self.vocab_size, self.dim)

    @property
    def U(self) -> np.ndarray:
        return self.params[self.vocab_size * self.dim :].reshape(self.vocab_size, self.dim)

    def copy(self) -> "NeuralLM":
        return NeuralLM(self.vocab_size, self.dim, self.params.copy(), self.vocab_hash)

    def next_token_logprobs(self, prompt: Sequence[int], prev: int) -> np.ndarray:
        E, U = self.E, self.U
        c = E[list(prompt)].mean(axis=0) if len(prompt) else np.zeros(self.dim)
        z = U @ (E[prev] + c)
        return z - (z.max() + math.log(np.exp(z - z.max()).sum()))


class BigramLM:
    """Add-alpha smoothed bigram conditionals ``p(next | prev)``; frozen."""

    kind = "ngram"

    def __init__(self, counts, alpha: float, vocab_hash: str | None = None):
        if not alpha > 0:
            raise InvalidInputError(f"smoothing constant must be > 0, got {alpha}")
        counts = np.array(counts, dtype=np.float64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 4:
            raise InvalidInputError(f"counts must be a V x V table with V >= 4, got {counts.shape}")
        self.counts = counts
        self.alpha = float(alpha)
        self.vocab_size = counts.shape[0]
        self.vocab_hash = vocab_hash
        self.counts.flags.writeable = False
        totals = counts.sum(axis=1, keepdims=True)
        self.table = np.log(counts + alpha) - np.log(totals + alpha * self.vocab_size)
        self.table.flags.writeable = False

    def copy(self) -> "BigramLM":
        return self

    def next_token_logprobs(self, prompt: Sequence[int], prev: int) -> np.ndarray:
        return self.table[prev]


@dataclass(frozen=True)
class ModelSnapshot:
    """Read-only copy of a model; ``index`` increases with every snapshot taken."""

    model: NeuralLM | BigramLM
    index: int = field(default=0)


_snapshot_counter = itertools.count(1)


def take_snapshot(model) -> ModelSnapshot:
    model = _unwrap(model)
    frozen = model.copy()
    if isinstance(frozen, NeuralLM):
        frozen.params.flags.writeable = False
    return ModelSnapshot(frozen, next(_snapshot_counter))


def _unwrap(model):
    return model.model if isinstance(model, ModelSnapshot) else model


# --- sequence packing -------------------------------------------------------


@dataclass
class Packed:
    """CSR layout consumed by the kernels; see ``kernels._pykernels``."""

    prompt_ids: np.ndarray
    prompt_ptr: np.ndarray
    resp_ids: np.ndarray
    resp_ptr: np.ndarray
    n_scored: np.ndarray

    def __len__(self) -> int:
        return len(self.prompt_ptr) - 1

    def args(self):
        return self.prompt_ids, self.prompt_ptr, self.resp_ids, self.resp_ptr, self.n_scored


def _check_ids(ids, vocab_size: int, what: str) -> None:
    for t in ids:
        if not 0 <= t < vocab_size:
            raise InvalidInputError(f"{what} token id {t} out of range for vocab size {vocab_size}")


def pack(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], vocab_size: int,
         max_len: int | None = None) -> Packed:
    """Validate and pack (prompt, response) pairs.

    With ``max_len`` set, a response of length ``max_len + 1`` is treated as
    truncated by the sampler: its final (forced) EOS contributes nothing.
    """
    prompt_chunks, resp_chunks, n_scored = [], [], []
    for prompt, response in pairs:
        if len(response) == 0:
            raise InvalidInputError("response is empty")
        if response[-1] != EOS:
            raise InvalidInputError("response must end with EOS")
        _check_ids(prompt, vocab_size, "prompt")
        _check_ids(response, vocab_size, "response")
        prompt_chunks.append(prompt)
        resp_chunks.append(response)
        L = len(response)
        if max_len is not None and L == max_len + 1:
            L -= 1
        n_scored.append(L)

    def csr(chunks):
        ptr = np.zeros(len(chunks) + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(c) for c in chunks])
        ids = np.fromiter(itertools.chain.from_iterable(chunks), dtype=np.int64, count=int(ptr[-1]))
        return ids, ptr

    p_ids, p_ptr = csr(prompt_chunks)
    r_ids, r_ptr = csr(resp_chunks)
    return Packed(p_ids, p_ptr, r_ids, r_ptr, np.asarray(n_scored, dtype=np.int64))


def _contexts(prompt: Sequence[int], response: Sequence[int], n: int) -> np.ndarray:
    prev = np.empty(n, dtype=np.int64)
    prev[0] = prompt[-1] if len(prompt) else BOS
    prev[1:] = response[: n - 1]
    return prev


def batch_log_prob(model, pairs, max_len: int | None = None, packed: Packed | None = None) -> np.ndarray:
    """Sequence log-probabilities (nats) for a list of (prompt, response) pairs."""
    model = _unwrap(model)
    if packed is None:
        packed = pack(pairs, model.vocab_size, max_len)
    if isinstance(model, NeuralLM):
        return kernels.get().seq_logprobs(model.E, model.U, *packed.args())
    out = np.zeros(len(packed))
    for i in range(len(packed)):
        x = packed.prompt_ids[packed.prompt_ptr[i] : packed.prompt_ptr[i + 1]]
        y = packed.resp_ids[packed.resp_ptr[i] : packed.resp_ptr[i + 1]]
        n = int(packed.n_scored[i])
        # correctly rounded, so the value does not depend on summation order
        out[i] = math.fsum(model.table[_contexts(x, y, n), y[:n]])
    return out


def batch_log_prob_grad(model, pairs, weights, max_len: int | None = None,
                        packed: Packed | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Log-probs and ``sum_i weights[i] * grad log p_i`` (flat, shaped like ``params``)."""
    model = _unwrap(model)
    if not isinstance(model, NeuralLM):
        raise UnsupportedOperationError(f"gradients are not available for {model.kind} models")
    if packed is None:
        packed = pack(pairs, model.vocab_size, max_len)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if weights.shape != (len(packed),):
        raise InvalidInputError(f"need one weight per sequence, got {weights.shape} for {len(packed)}")
    logps, dE, dU = kernels.get().seq_logprobs_grad(model.E, model.U, *packed.args(), weights)
    return logps, np.concatenate([np.asarray(dE).reshape(-1), np.asarray(dU).reshape(-1)])


def log_prob(model, prompt: Sequence[int], response: Sequence[int], max_len: int | None = None) -> float:
    """``sum_t log p(y_t | x, y_<t)`` in nats."""
    return float(batch_log_prob(model, [(prompt, response)], max_len)[0])


def grad_log_prob(model, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
    return batch_log_prob_grad(model, [(prompt, response)], np.ones(1))[1]


def perplexity(scorer, prompt: Sequence[int], response: Sequence[int]) -> float:
    """``exp(-log_prob / L)`` with L the response length including EOS."""
    return math.exp(-log_prob(scorer, prompt, response) / len(response))


def sample(model, prompt: Sequence[int], max_len: int = DEFAULT_MAX_LEN, seed: int | None = None,
           rng: np.random.Generator | None = None) -> tuple[int, ...]:
    """Ancestral sample; at most ``max_len`` drawn tokens, EOS appended if none was drawn.

    Exactly ``max_len`` uniforms are consumed from the generator whatever the
    sequence length, so downstream draws do not depend on where EOS fell.
    """
    if max_len < 1:
        raise InvalidInputError(f"max_len must be >= 1, got {max_len}")
    model = _unwrap(model)
    _check_ids(prompt, model.vocab_size, "prompt")
    if rng is None:
        rng = np.random.default_rng(None if seed is None else seed & ((1 << 64) - 1))
    uniforms = rng.random(max_len)
    if isinstance(model, NeuralLM):
        x = np.asarray(prompt, dtype=np.int64)
        toks = [int(t) for t in kernels.get().sample_tokens(model.E, model.U, x, uniforms)]
    else:
        toks = []
        prev = prompt[-1] if len(prompt) else BOS
        for u in uniforms:
            cdf = np.cumsum(np.exp(model.next_token_logprobs(prompt, prev)))
            tok = min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), len(cdf) - 1)
            toks.append(tok)
            if tok == EOS:
                break
            prev = tok
    if not toks or toks[-1] != EOS:
        toks.append(EOS)
    return tuple(toks)


# --- fitting ----------------------------------------------------------------


def fit_ngram_scorer(corpus: Iterable[Sequence[int]], alpha: float = 0.5, vocab_size: int | None = None,
                     vocab_hash: str | None = None) -> BigramLM:
    """Count adjacent-token transitions inside each sequence and smooth by ``alpha``."""
    if not alpha > 0:
        raise InvalidInputError(f"smoothing constant must be > 0, got {alpha}")
    corpus = [np.asarray(seq, dtype=np.int64) for seq in corpus]
    if vocab_size is None:
        vocab_size = max([4] + [int(s.max()) + 1 for s in corpus if len(s)])
    counts = np.zeros((vocab_size, vocab_size))
    for seq in corpus:
        _check_ids(seq, vocab_size, "corpus")
        if len(seq) > 1:
            np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
    return BigramLM(counts, alpha, vocab_hash)


def corpus_log_prob(model, corpus) -> float:
    """Mean sequence log-probability over (prompt, response) pairs."""
    return float(batch_log_prob(model, corpus).mean())


def fit_sft(corpus: Sequence[tuple[Sequence[int], Sequence[int]]], epochs: int = 20, lr: float = 0.05,
            seed: int = 0, *, dim: int = 8, vocab_size: int | None = None, batch_size: int = 16,
            init_scale: float = 0.1, vocab_hash: str | None = None) -> NeuralLM:
    """Maximum-likelihood training of a fresh :class:`NeuralLM` with Adam (no decay)."""
    from .optim import AdamWConfig, OptimizerState, adamw_step

    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("SFT corpus is empty")
    if vocab_size is None:
        vocab_size = max(4, 1 + max(max([*p, *r]) for p, r in corpus))
    model = NeuralLM.random(vocab_size, dim, seed, init_scale, vocab_hash)
    rng = np.random.default_rng(seed)
    opt = AdamWConfig(lr=lr, weight_decay=0.0, warmup_fraction=0.0, total_steps=None)
    state = OptimizerState.zeros_like(model.params)
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(corpus), batch_size):
            idx = order[start : start + batch_size]
            batch = [corpus[i] for i in idx]
            _, g = batch_log_prob_grad(model, batch, np.full(len(batch), -1.0 / len(batch)))
            adamw_step(state, model.params, g, opt)
    return model


# --- serialization ------------------------------------------------------------


def _floats_to_hex(a: np.ndarray) -> list[str]:
    return [f"{b:016x}" for b in np.ascontiguousarray(a, dtype="<f8").view("<u8").reshape(-1)]


def _hex_to_floats(items: Sequence[str]) -> np.ndarray:
    return np.array([int(h, 16) for h in items], dtype="<u8").view("<f8").astype(np.float64)


def model_to_dict(model) -> dict:
    model = _unwrap(model)
    doc = {"format_version": MODEL_FORMAT_VERSION, "kind": model.kind,
           "vocab_hash": model.vocab_hash, "vocab_size": model.vocab_size}
    if isinstance(model, NeuralLM):
        doc.update(dim=model.dim, params=_floats_to_hex(model.params))
    else:
        doc.update(alpha_hex=_floats_to_hex(np.array([model.alpha]))[0], alpha=model.alpha,
                   counts=_floats_to_hex(model.counts))
    return doc


def model_from_dict(doc: dict):
    try:
        kind = doc["kind"]
        V = int(doc["vocab_size"])
        if kind == "neural":
            return NeuralLM(V, int(doc["dim"]), _hex_to_floats(doc["params"]), doc.get("vocab_hash"))
        if kind == "ngram":
            alpha = float(_hex_to_floats([doc["alpha_hex"]])[0])
            counts = _hex_to_floats(doc["counts"]).reshape(V, V)
            return BigramLM(counts, alpha, doc.get("vocab_hash"))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"bad model document: {exc}") from None
    raise DataFormatError(f"unknown model kind {doc.get('kind')!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc}", path=path) from None
    return model_from_dict(doc)
