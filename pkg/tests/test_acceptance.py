"""End-to-end acceptance suite. Each criterion prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest

from prl import autodiff as ad
from prl.data import (
    CLICK, PURCHASE, RewardConfig, SynthSpec, cumulative_rewards_from, generate_prompts,
    synth_corpus,
)
from prl.evaluation import InferenceRewardConfig, hr_ndcg, metrics_from_ranks, target_ranks
from prl.experiments import BIASED, CONDITIONING, conditioning_accuracy, prepare
from prl.model import PRLModel, TrainConfig, train
from prl.rng import Rng

from gradcheck import check_grads, op_cases, rand

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(autouse=True)
def clean_graph():
    ad.get_graph().clear()
    yield
    ad.get_graph().clear()


@pytest.fixture(scope="module")
def biased():
    return prepare(BIASED)


def test_1_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = 0.0
    cfg = TrainConfig(embed_dim=4, encoder="gru", dropout=0.0)
    for seed in range(20):
        rng = Rng(seed)
        for f, tensors in op_cases(rng).values():
            worst = max(worst, check_grads(f, tensors))
        x = rand(rng, 3, 5, name="x")
        mask_seed = int(rng.integers(0, 2**31))
        # a fresh generator per call replays the same mask for every difference
        worst = max(worst, check_grads(
            lambda: (ad.dropout(x, 0.3, True, Rng(mask_seed)) * x).sum(), [x]))

        prompts = synth_corpus(SynthSpec(vocab=6, sessions=4, max_len=12, seed=seed))
        batch = generate_prompts(prompts, RewardConfig(discount=float(rng.random())))
        batch = batch.subset(np.arange(min(6, len(batch))))
        model = PRLModel(6, cfg, Rng(seed))
        worst = max(worst, check_grads(lambda: model.loss(batch), list(model.params.values())))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-4 and elapsed < 60,
            f"worst relative error {worst:.2e} over 20 instances, {elapsed:.1f}s")


@pytest.mark.parametrize("mode", ["absolute", "relative"])
def test_2_reward_recursion(verdict, mode):
    rng = Rng(2)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 51)) - 1  # action steps of a 3..50 item session
        lam = float(rng.random())
        r = [1.0 if rng.random() < 0.3 else 0.2 for _ in range(n)]
        got = cumulative_rewards_from(r, RewardConfig(discount=lam, discount_mode=mode))
        for t in range(1, n + 1):
            power = (lambda tp: tp) if mode == "absolute" else (lambda tp: tp - t)
            direct = math.fsum(lam ** power(tp) * r[tp - 1] for tp in range(t, n + 1))
            worst = max(worst, abs(got[t - 1] - direct))
    verdict(2, worst <= 1e-12, f"{mode}: max |recursion - direct| = {worst:.1e} on 1000 sessions")


def test_3_metric_oracle(verdict):
    rng = Rng(3)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        logits = np.round(rng.uniform(n, -1, 1), 1)
        target = int(rng.integers(1, n + 1))
        order = sorted(range(1, n + 1), key=lambda i: (-logits[i - 1], i))
        rank = order.index(target) + 1
        got = int(target_ranks(logits, [target])[0])
        for k in (5, 10, 20):
            hit = 1 if target in order[:k] else 0
            ng = 1.0 / math.log2(rank + 1) if hit else 0.0
            mismatches += (got != rank) or hr_ndcg(got, k) != (hit, ng)
    # evaluate() also runs EvalReport.check() on every report it emits
    reports = []
    for _ in range(50):
        m = int(rng.integers(1, 200))
        purchase = np.array([rng.random() < 0.3 for _ in range(m)])
        reports.append(metrics_from_ranks(rng.integers(1, 60, size=m), purchase, np.ones(m)))
    monotone = all(r.hr[b][5] <= r.hr[b][10] <= r.hr[b][20] for r in reports for b in (PURCHASE, CLICK))
    verdict(3, mismatches == 0 and monotone,
            f"{mismatches} oracle mismatches in 1000 cases, monotone over {len(reports)} reports: {monotone}")


def test_4_overfit(verdict):
    start = time.perf_counter()
    sessions = synth_corpus(SynthSpec(vocab=50, sessions=20, max_len=6, seed=0))
    prompts = generate_prompts(sessions, RewardConfig()).subset(np.arange(32))
    cfg = TrainConfig(batch_size=32, epochs=500, embed_dim=16, seed=0)
    result = train(prompts, 50, cfg, max_steps=500, log_every_epoch=False)
    reached = next((i + 1 for i, v in enumerate(result.loss_trace) if v < 0.05), None)
    final = result.model.loss(prompts).item()
    elapsed = time.perf_counter() - start
    verdict(4, reached is not None and final < 0.05 and elapsed < 120,
            f"loss < 0.05 at step {reached}, final mean loss {final:.2e}, {elapsed:.1f}s")


def test_5_prompt_conditioning(verdict):
    start = time.perf_counter()
    prep = prepare(CONDITIONING)
    high, low = conditioning_accuracy(prep, prep.fit("prl"))
    elapsed = time.perf_counter() - start
    verdict(5, high >= 0.9 and low >= 0.9 and elapsed < 300,
            f"high-tier top-1 {high:.3f}, low-tier top-1 {low:.3f}, {elapsed:.1f}s")


def test_6_prl_beats_plain(verdict, biased):
    prl = biased.evaluate(biased.fit("prl"))
    plain = biased.evaluate(biased.fit("plain"))
    a, b = prl.hr[PURCHASE][5], plain.hr[PURCHASE][5]
    verdict(6, a > b, f"purchase HR@5: PRL {a:.4f} vs plain CE {b:.4f}")


def test_7_immediate_vs_cumulative(verdict, biased):
    imm = biased.evaluate(biased.fit("prl"))
    cum = biased.evaluate(biased.fit("prl_cumu"))
    a, b = imm.ndcg[PURCHASE][10], cum.ndcg[PURCHASE][10]
    verdict(7, a >= b, f"purchase NDCG@10: immediate {a:.4f} vs cumulative {b:.4f}")


def test_8_mu_sweep(verdict, biased):
    rows = biased.sweep(biased.fit("prl"), "mu", [0.5, 1.0, 2.0, 3.0, 4.0])
    curve = [r["cumulative_reward_at_1"] for r in rows]
    verdict(8, len(set(curve)) > 1, f"cumulative reward@1 over mu: {[round(c, 2) for c in curve]}")


def test_9_determinism(verdict, tmp_path):
    prompts = generate_prompts(synth_corpus(SynthSpec(vocab=15, sessions=80, max_len=8, seed=9)),
                               RewardConfig(discount=0.5, discount_mode="relative"))
    cfg = TrainConfig(batch_size=32, epochs=2, embed_dim=8, dropout=0.3, seed=4)
    blobs = []
    for run in ("a", "b"):
        train(prompts, 15, cfg, checkpoint_dir=tmp_path / run, log_every_epoch=False)
        blobs.append((tmp_path / run / "model.ckpt").read_bytes())
    same_ckpt = blobs[0] == blobs[1]

    prep = prepare(CONDITIONING)
    model = PRLModel(prep.n_items, TrainConfig(embed_dim=8), Rng(0))
    noisy = InferenceRewardConfig(mu=2.0, epsilon=0.5, seed=7)
    same_report = prep.evaluate(model, noisy).to_text() == prep.evaluate(model, noisy).to_text()
    eps0 = {prep.evaluate(model, InferenceRewardConfig(mu=2.0, seed=s)).to_csv() for s in range(5)}
    ok = same_ckpt and same_report and len(eps0) == 1
    verdict(9, ok, f"checkpoints identical: {same_ckpt}, reports identical: {same_report}, "
                   f"epsilon=0 seed-independent: {len(eps0) == 1}")
