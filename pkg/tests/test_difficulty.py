import math

import numpy as np
import pytest

from curridpo import data, difficulty, toylm
from curridpo.data import PreferenceSample
from curridpo.errors import DataValidationError, InvalidInputError
from curridpo.seeding import hash64, splitmix64
from curridpo.toylm import EOS


def oracle_seed(base, prompt_id, i):
    # mix(base, hash64(prompt_id), i) spelled out with the primitives
    h = splitmix64(base)
    h = splitmix64(h ^ hash64(prompt_id))
    return splitmix64(h ^ i)


def oracle_pc(model, scorer, prompt, N, base, prompt_id, max_len=toylm.DEFAULT_MAX_LEN):
    """Serial re-computation: draw the N seeded samples and apply the std formula directly."""
    ppl = []
    for i in range(N):
        y = toylm.sample(model, prompt, max_len, seed=oracle_seed(base, prompt_id, i))
        terms = []
        prev = prompt[-1] if prompt else toylm.BOS
        for t in y:
            terms.append(scorer.table[prev, t])
            prev = t
        ppl.append(math.exp(-math.fsum(terms) / len(y)))
    d = [p - ppl[0] for p in ppl]
    mean = math.fsum(d) / N
    return math.sqrt(math.fsum((x - mean) ** 2 for x in d) / (N - 1))


def small_world(seed=0):
    m = toylm.NeuralLM.random(8, 3, seed, 0.8)
    rng = np.random.default_rng(seed)
    scorer = toylm.fit_ngram_scorer([rng.integers(0, 8, size=12) for _ in range(10)], 0.5, 8)
    return m, scorer


def test_sample_std_stub_values():
    assert difficulty.sample_std([8.0, 10.0, 12.0]) == 2.0


def test_sample_std_needs_two():
    with pytest.raises(InvalidInputError):
        difficulty.sample_std([1.0])


def test_pc_from_stubbed_perplexities(monkeypatch):
    monkeypatch.setattr(difficulty, "sampled_perplexities", lambda *a, **k: [8.0, 10.0, 12.0])
    assert difficulty.prompt_complexity(None, None, (3,), N=3) == 2.0


def test_pc_zero_for_deterministic_model():
    V, d = 5, 2
    E = np.ones((V, d))
    U = np.zeros((V, d))
    U[3] = 1e3
    U[EOS] = 0.0
    # forced path: always token 3 until the length cap, then a forced EOS
    m = toylm.NeuralLM(V, d, np.concatenate([E.ravel(), U.ravel()]))
    scorer = toylm.fit_ngram_scorer([[3, 4, 3]], 0.5, V)
    assert difficulty.prompt_complexity(m, scorer, (3,), N=10, base_seed=5, max_len=6) == 0.0


def test_pc_rejects_small_n():
    m, s = small_world()
    with pytest.raises(InvalidInputError):
        difficulty.prompt_complexity(m, s, (3,), N=1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pc_matches_serial_oracle(backend, seed):
    m, s = small_world(seed)
    for prompt in [(3,), (4, 5), ()]:
        pid = f"p{len(prompt)}"
        assert difficulty.prompt_complexity(m, s, prompt, 10, seed, pid) == oracle_pc(m, s, prompt, 10, seed, pid)


@pytest.mark.parametrize("w,l,expected", [(9.0, 4.0, 5.0), (7.0, 7.0, 0.0), (4.0, 9.0, 5.0)])
def test_pd_examples(w, l, expected):
    assert difficulty.pairwise_distinguishability(w, l) == expected


@pytest.mark.parametrize("bad", [None, math.nan, math.inf])
def test_pd_rejects_bad_scores(bad):
    with pytest.raises(InvalidInputError):
        difficulty.pairwise_distinguishability(bad, 1.0)


def _pairs_for(prompt_ids, per_prompt=3):
    out = []
    for n, pid in enumerate(prompt_ids):
        for j in range(per_prompt):
            out.append(PreferenceSample(f"{pid}#{j}", pid, (3 + n % 4,), (4, EOS), (5, 5, EOS), 9.0, 9.0 - j - 1,
                                        j + 2))
    return out


def test_pc_computed_once_per_prompt(monkeypatch):
    m, s = small_world()
    calls = []
    real = difficulty.prompt_complexity

    def counting(*args, **kwargs):
        calls.append(args[2])
        return real(*args, **kwargs)

    monkeypatch.setattr(difficulty, "prompt_complexity", counting)
    scored = difficulty.score_dataset(_pairs_for(["only"]), m, s, N=10)
    assert len(calls) == 1
    assert [x.pd for x in scored] == [1.0, 2.0, 3.0]
    assert len({x.pc for x in scored}) == 1
    assert all(x.n_samples_used == 10 for x in scored)


def test_score_dataset_parallel_is_bit_identical():
    m, s = small_world(3)
    pairs = _pairs_for([f"p{i}" for i in range(12)])
    serial = difficulty.score_dataset(pairs, m, s, N=10, base_seed=4, workers=1)
    parallel = difficulty.score_dataset(pairs, m, s, N=10, base_seed=4, workers=8)
    assert [(x.pair_id, x.pc, x.pd) for x in serial] == [(x.pair_id, x.pc, x.pd) for x in parallel]


def test_score_dataset_matches_serial_loop_on_synthetic():
    cfg = data.SyntheticConfig(classes=[data.PromptClass("low", 0.25, 3), data.PromptClass("high", 4.0, 2)])
    records, _ = data.generate_synthetic(cfg)
    vocab = data.synthetic_vocab(cfg)
    pairs = data.derive_all_pairs(records, vocab)
    m = toylm.NeuralLM.random(len(vocab), 4, 0, 0.5)
    s = toylm.fit_ngram_scorer([p.prompt + p.chosen for p in pairs], 0.5, len(vocab))
    scored = difficulty.score_dataset(pairs, m, s, N=10, base_seed=17, workers=3)
    for x in scored:
        assert x.pc == oracle_pc(m, s, x.sample.prompt, 10, 17, x.sample.prompt_id)
        assert x.pd == abs(x.sample.score_w - x.sample.score_l)
        assert x.pc >= 0 and x.pd >= 0


def test_score_dataset_missing_score():
    m, s = small_world()
    bad = PreferenceSample("a#2", "a", (3,), (4, EOS), (5, EOS), 9.0, None, 2)
    with pytest.raises(DataValidationError):
        difficulty.score_dataset([bad], m, s)
