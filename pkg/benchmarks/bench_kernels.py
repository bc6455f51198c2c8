"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--vocab 40] [--dim 8]

Prints best-of-N wall time per operation and the speedup of each backend
relative to the numpy fallback.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from curridpo import dpo, kernels, toylm
from curridpo.toylm import EOS


def workload(V: int, d: int, batch: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    model = toylm.NeuralLM.random(V, d, seed, 0.3)
    ref = model.copy()
    ref.params += rng.normal(0, 0.05, ref.params.size)
    triples = []
    for _ in range(batch):
        x = tuple(int(t) for t in rng.integers(3, V, size=3))
        yw = (*[int(t) for t in rng.integers(3, V, size=rng.integers(1, 7))], EOS)
        yl = (*[int(t) for t in rng.integers(3, V, size=rng.integers(1, 7))], EOS)
        triples.append((x, yw, yl))
    return model, ref, triples


def cases(V: int, d: int):
    model, ref, small = workload(V, d, 16)
    _, _, big = workload(V, d, 512, seed=1)
    pairs = [(x, y) for x, y, _ in big]
    packed = toylm.pack(pairs, V)
    weights = np.ones(len(pairs))
    prompts = [x for x, _, _ in small] * 4
    return {
        "seq_logprobs (512 seqs)": lambda: toylm.batch_log_prob(model, None, packed=packed),
        "seq_logprobs_grad (512 seqs)": lambda: toylm.batch_log_prob_grad(model, None, weights, packed=packed),
        "dpo_loss_and_grad (batch 16)": lambda: dpo.dpo_loss_and_grad(model, ref, small, 0.1),
        "sample x64 (max_len 32)": lambda: [toylm.sample(model, x, 32, seed=i) for i, x in enumerate(prompts)],
        "estimate_kl (64 prompts)": lambda: dpo.estimate_kl(model, ref, prompts, 1, 32, seed=0),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--vocab", type=int, default=40)
    ap.add_argument("--dim", type=int, default=8)
    args = ap.parse_args(argv)

    names = sorted(kernels.BACKENDS, key=lambda b: b != "python")
    if len(names) == 1:
        print("compiled backend not built; timing the numpy fallback only")
    results: dict[str, dict[str, float]] = {}
    for backend in names:
        with kernels.use_backend(backend):
            for case, fn in cases(args.vocab, args.dim).items():
                fn()  # warm up
                best = min(timeit.repeat(fn, repeat=args.repeat, number=args.number)) / args.number
                results.setdefault(case, {})[backend] = best

    header = f"{'operation':32}" + "".join(f"{b + ' (ms)':>16}" for b in names) + f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for case, times in results.items():
        row = f"{case:32}" + "".join(f"{times[b] * 1e3:16.3f}" for b in names)
        if len(names) > 1:
            row += f"{times['python'] / times[names[-1]]:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
