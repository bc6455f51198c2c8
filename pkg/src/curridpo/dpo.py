"""Stage-wise DPO objective, KL estimation and the KL-triggered reference update."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import toylm
from .errors import ConfigError, InvalidInputError, UnsupportedScaleError
from .optim import AdamWConfig, OptimizerState, adamw_step, lr_at  # noqa: F401  (re-exported)
from .toylm import EOS, ModelSnapshot, take_snapshot

MAX_ENUMERATION = 10**6

Triple = tuple[Sequence[int], Sequence[int], Sequence[int]]


@dataclass
class DpoConfig:
    beta: float = 0.1
    delta: float = 0.05
    kl_interval: int = 50
    kl_batches: int = 4
    kl_samples_per_prompt: int = 1
    kl_max_len: int = toylm.DEFAULT_MAX_LEN
    lr: float = 1e-2
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        if self.kl_interval < 1 or self.kl_batches < 1 or self.kl_samples_per_prompt < 1:
            raise ConfigError("kl_interval, kl_batches and kl_samples_per_prompt must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")

    def optimizer(self, total_steps: int | None) -> AdamWConfig:
        return AdamWConfig(self.lr, tuple(self.betas), self.eps, self.weight_decay, self.warmup_fraction,
                           total_steps)


def _check_vocab(policy, reference) -> None:
    p, r = toylm._unwrap(policy), toylm._unwrap(reference)
    if p.vocab_size != r.vocab_size or (p.vocab_hash and r.vocab_hash and p.vocab_hash != r.vocab_hash):
        raise InvalidInputError(
            f"policy and reference vocabularies differ ({p.vocab_size}/{p.vocab_hash} vs "
            f"{r.vocab_size}/{r.vocab_hash})")


def _pack_batch(batch: Sequence[Triple], vocab_size: int) -> toylm.Packed:
    if len(batch) == 0:
        raise InvalidInputError("empty DPO batch")
    seqs = [(x, yw) for x, yw, _ in batch] + [(x, yl) for x, _, yl in batch]
    return toylm.pack(seqs, vocab_size)


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def dpo_loss_from_margins(margins, beta: float) -> float:
    """``-mean(log sigmoid(beta * margin))`` for log-ratio margins ``delta_w - delta_l``."""
    margins = np.asarray(margins, dtype=np.float64)
    return float(-log_sigmoid(beta * margins).mean())


def log_ratio_margins(policy, reference, batch: Sequence[Triple], packed=None) -> np.ndarray:
    _check_vocab(policy, reference)
    if packed is None:
        packed = _pack_batch(batch, toylm._unwrap(policy).vocab_size)
    b = len(packed) // 2
    ratio = toylm.batch_log_prob(policy, None, packed=packed) - toylm.batch_log_prob(reference, None, packed=packed)
    return ratio[:b] - ratio[b:]


def dpo_loss(policy, reference, batch: Sequence[Triple], beta: float) -> float:
    return dpo_loss_from_margins(log_ratio_margins(policy, reference, batch), beta)


def dpo_loss_and_grad(policy, reference, batch: Sequence[Triple], beta: float) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the policy's flat parameters.

    dL/dlogpi(y_w) = -(beta / b) * sigmoid(-beta * margin), and the negative of
    that for y_l; the reference enters only through the margin.
    """
    _check_vocab(policy, reference)
    packed = _pack_batch(batch, toylm._unwrap(policy).vocab_size)
    b = len(packed) // 2
    ref_lp = toylm.batch_log_prob(reference, None, packed=packed)
    # weights depend on the margins, so the policy is evaluated twice
    pol_lp = toylm.batch_log_prob(policy, None, packed=packed)
    ratio = pol_lp - ref_lp
    margins = ratio[:b] - ratio[b:]
    z = beta * margins
    loss = float(-log_sigmoid(z).mean())
    coef = (beta / b) * np.exp(log_sigmoid(-z))
    weights = np.concatenate([-coef, coef])
    _, grad = toylm.batch_log_prob_grad(policy, None, weights, packed=packed)
    return loss, grad


def dpo_grad(policy, reference, batch: Sequence[Triple], beta: float) -> np.ndarray:
    return dpo_loss_and_grad(policy, reference, batch, beta)[1]


# --- KL ------------------------------------------------------------------------


def kl_samples(policy, reference, prompts: Sequence[Sequence[int]], samples_per_prompt: int = 1,
               max_len: int = toylm.DEFAULT_MAX_LEN, seed: int = 0) -> np.ndarray:
    """Per-sample ``log q_theta(y|x) - log q_ref(y|x)`` for ``y`` drawn from the policy.

    ``q`` is the sampler's sequence distribution: a forced EOS after
    ``max_len`` drawn tokens has probability one under both models.
    """
    if len(prompts) == 0:
        raise InvalidInputError("KL estimate needs at least one prompt")
    if samples_per_prompt < 1:
        raise InvalidInputError("samples_per_prompt must be >= 1")
    _check_vocab(policy, reference)
    rng = np.random.default_rng(seed & ((1 << 64) - 1))
    pairs = []
    for x in prompts:
        for _ in range(samples_per_prompt):
            pairs.append((x, toylm.sample(policy, x, max_len, rng=rng)))
    packed = toylm.pack(pairs, toylm._unwrap(policy).vocab_size, max_len)
    return toylm.batch_log_prob(policy, None, packed=packed) - toylm.batch_log_prob(reference, None, packed=packed)


def estimate_kl(policy, reference, prompts, samples_per_prompt: int = 1,
                max_len: int = toylm.DEFAULT_MAX_LEN, seed: int = 0) -> float:
    """Monte-Carlo ``KL(policy || reference)``; unclipped, so it can be negative."""
    return float(kl_samples(policy, reference, prompts, samples_per_prompt, max_len, seed).mean())


def exact_kl(policy, reference, prompts, max_len: int) -> float:
    """KL between the sampler distributions, by enumerating every reachable response.

    Walks the prefix tree with each model's next-token conditionals directly,
    independent of the batched log-prob kernels.
    """
    if len(prompts) == 0:
        raise InvalidInputError("exact KL needs at least one prompt")
    _check_vocab(policy, reference)
    p, r = toylm._unwrap(policy), toylm._unwrap(reference)
    V = p.vocab_size
    n_seq = sum((V - 1) ** j for j in range(max_len)) + (V - 1) ** max_len
    if n_seq > MAX_ENUMERATION:
        raise UnsupportedScaleError(f"{n_seq} sequences per prompt exceeds the enumeration limit {MAX_ENUMERATION}")

    total = 0.0
    for x in prompts:
        x = list(x)
        start = x[-1] if x else toylm.BOS
        kl = 0.0
        # stack of (prev token, depth, log q_p(prefix), log q_r(prefix))
        stack = [(start, 0, 0.0, 0.0)]
        while stack:
            prev, depth, lp, lr = stack.pop()
            if depth == max_len:
                # forced EOS
                kl += math.exp(lp) * (lp - lr)
                continue
            lpp = p.next_token_logprobs(x, prev)
            lrr = r.next_token_logprobs(x, prev)
            for v in range(V):
                a, b = lp + lpp[v], lr + lrr[v]
                if v == EOS:
                    kl += math.exp(a) * (a - b)
                else:
                    stack.append((v, depth + 1, a, b))
        total += kl
    return total / len(prompts)


# --- reference management ----------------------------------------------------------


@dataclass
class ReferenceManager:
    reference: ModelSnapshot
    update_steps: list[int] = field(default_factory=list)
    last_kl: float | None = None

    @classmethod
    def from_model(cls, model) -> "ReferenceManager":
        return cls(take_snapshot(model))

    @property
    def update_count(self) -> int:
        return len(self.update_steps)


def maybe_update_reference(manager: ReferenceManager, policy, kl_estimate: float, delta: float,
                           step: int | None = None) -> bool:
    """Replace the reference with a snapshot of ``policy`` iff ``kl_estimate > delta``."""
    if not math.isfinite(kl_estimate):
        raise InvalidInputError(f"KL estimate must be finite, got {kl_estimate}")
    manager.last_kl = kl_estimate
    if kl_estimate > delta:
        manager.reference = take_snapshot(policy)
        manager.update_steps.append(step if step is not None else manager.update_count + 1)
        return True
    return False
