import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prl.data import (
    CLICK, CONTEXT_LEN, PURCHASE, DataError, PromptSet, RewardConfig, Session, SynthSpec,
    compute_cumulative_rewards, compute_step_reward_averages, filter_sessions,
    generate_prompts, ingest_events, read_prompts, read_sessions, split_dataset,
    synth_corpus, transition_table, write_prompts, write_sessions,
)
from prl.rng import Rng


def direct_rewards(rewards, lam, mode):
    """Quadratic-time oracle: sum the discounted suffix at every step."""
    out = []
    for t in range(1, len(rewards) + 1):
        if mode == "absolute":
            out.append(sum(lam ** tp * rewards[tp - 1] for tp in range(t, len(rewards) + 1)))
        else:
            out.append(sum(lam ** (tp - t) * rewards[tp - 1] for tp in range(t, len(rewards) + 1)))
    return out


def session(behaviors, items=None, sid="s"):
    items = items or list(range(1, len(behaviors) + 1))
    return Session(sid, items, behaviors)


class TestIngest:
    def test_sorts_by_time(self):
        rows = [("a", "3", "x", "click"), ("a", "1", "y", "click"), ("a", "2", "z", "buy")]
        res = ingest_events(rows)
        assert len(res.sessions) == 1
        s = res.sessions[0]
        assert [k for k, v in sorted(res.item_map.items(), key=lambda kv: kv[1])] == ["y", "z", "x"]
        assert s.items == [1, 2, 3]
        assert s.behaviors == [CLICK, PURCHASE, CLICK]

    def test_interleaved_sessions(self):
        rows = [("a", "1", "p", "view"), ("b", "1", "q", "view"), ("a", "2", "r", "addtocart"),
                ("b", "2", "p", "view")]
        res = ingest_events(rows)
        assert [s.session_id for s in res.sessions] == ["a", "b"]
        assert res.sessions[0].items == [1, 2]
        assert res.sessions[1].items == [3, 1]
        assert res.sessions[0].behaviors == [CLICK, PURCHASE]

    def test_unknown_behavior_skipped(self):
        rows = [("a", "1", "p", "view"), ("a", "2", "q", "wishlist"), ("a", "3", "r", "view")]
        res = ingest_events(rows)
        assert res.skipped == 1
        assert len(res.sessions[0]) == 2

    def test_iso_timestamps(self):
        rows = [("a", "2014-04-07T10:54:09.868Z", "2", "click"),
                ("a", "2014-04-07T10:51:09.277Z", "1", "click")]
        assert ingest_events(rows).item_map == {"1": 1, "2": 2}

    def test_empty_input(self):
        with pytest.raises(DataError):
            ingest_events([])


class TestFilter:
    def test_short_and_long_removed(self):
        ss = [session([CLICK] * n, sid=str(n)) for n in (2, 3, 50, 51)]
        assert [s.session_id for s in filter_sessions(ss)] == ["3", "50"]

    def test_rare_items_deleted_before_length_check(self):
        a = Session("a", [1, 2, 3, 9], [CLICK] * 4)
        b = Session("b", [1, 2, 3, 9], [CLICK] * 4)
        c = Session("c", [1, 2, 3], [CLICK] * 3)
        out = filter_sessions([a, b, c], min_item_count=3)
        assert all(9 not in s.items for s in out)
        assert [len(s) for s in out] == [3, 3, 3]

    def test_rare_item_deletion_can_drop_session(self):
        a = Session("a", [1, 2, 7], [CLICK] * 3)
        b = Session("b", [1, 2, 3], [CLICK] * 3)
        c = Session("c", [1, 2, 3], [CLICK] * 3)
        d = Session("d", [1, 2, 3], [CLICK] * 3)
        out = filter_sessions([a, b, c, d], min_item_count=3)
        assert [s.session_id for s in out] == ["b", "c", "d"]

    def test_all_removed_is_error(self):
        with pytest.raises(DataError):
            filter_sessions([session([CLICK, CLICK])])


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(10, (8, 1, 1)), (20, (16, 2, 2)), (200, (160, 20, 20))])
    def test_ratio(self, n, sizes):
        ss = [session([CLICK] * 3, sid=str(i)) for i in range(n)]
        sp = split_dataset(ss, seed=0)
        assert (len(sp.train), len(sp.valid), len(sp.test)) == sizes

    @given(st.integers(10, 300), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_disjoint_deterministic_and_proportional(self, n, seed):
        ss = [session([CLICK] * 3, sid=str(i)) for i in range(n)]
        a, b = split_dataset(ss, seed), split_dataset(ss, seed)
        ids = lambda part: [s.session_id for s in part]
        assert ids(a.train) == ids(b.train) and ids(a.test) == ids(b.test)
        all_ids = ids(a.train) + ids(a.valid) + ids(a.test)
        assert sorted(all_ids) == sorted(str(i) for i in range(n))
        assert abs(len(a.valid) - n / 10) <= 1 and abs(len(a.test) - n / 10) <= 1
        assert abs(len(a.train) - 0.8 * n) <= 1

    def test_too_few(self):
        with pytest.raises(DataError):
            split_dataset([session([CLICK] * 3)] * 9, 0)


class TestCumulativeRewards:
    def test_lambda_one(self):
        cfg = RewardConfig(discount=1.0)
        assert compute_cumulative_rewards(session([CLICK, CLICK, PURCHASE]), cfg) == pytest.approx([1.2, 1.0])

    def test_lambda_zero(self):
        cfg = RewardConfig(discount=0.0)
        assert compute_cumulative_rewards(session([CLICK, CLICK, PURCHASE]), cfg) == [0.0, 0.0]

    def test_lambda_half_matches_direct_sum(self):
        cfg = RewardConfig(discount=0.5)
        expected = direct_rewards([0.2, 1.0], 0.5, "absolute")
        assert expected == pytest.approx([0.35, 0.25], abs=1e-15)
        assert compute_cumulative_rewards(session([CLICK, CLICK, PURCHASE]), cfg) == pytest.approx(expected, abs=1e-15)

    def test_relative_mode(self):
        cfg = RewardConfig(discount=0.5, discount_mode="relative")
        # 0.2 + 0.5 * 1.0, then 1.0
        assert compute_cumulative_rewards(session([CLICK, CLICK, PURCHASE]), cfg) == pytest.approx([0.7, 1.0])

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            RewardConfig(discount=1.5)

    def test_bad_rewards(self):
        with pytest.raises(ValueError):
            RewardConfig(r_click=2.0, r_purchase=1.0)

    def test_too_short(self):
        with pytest.raises(DataError):
            compute_cumulative_rewards(session([CLICK]), RewardConfig())

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from([CLICK, PURCHASE]), min_size=3, max_size=50),
           st.floats(0.0, 1.0), st.sampled_from(["absolute", "relative"]))
    def test_recursion_equals_direct(self, behaviors, lam, mode):
        cfg = RewardConfig(discount=lam, discount_mode=mode)
        got = compute_cumulative_rewards(session(behaviors), cfg)
        rewards = [cfg.reward(b) for b in behaviors[1:]]
        np.testing.assert_allclose(got, direct_rewards(rewards, lam, mode), rtol=0, atol=1e-12)


class TestPrompts:
    def test_worked_example(self):
        a, b, c = 7, 8, 9
        s = Session("s", [a, b, c], [CLICK, CLICK, PURCHASE])
        p = generate_prompts([s], RewardConfig(discount=0.5))
        assert len(p) == 2
        first, second = p[0], p[1]
        assert first.cumulative_reward == pytest.approx(0.35)
        assert first.context == (0,) * 9 + (a,)
        assert (first.step, first.action, first.immediate_reward) == (1, b, 0.2)
        assert second.cumulative_reward == pytest.approx(0.25)
        assert second.context == (0,) * 8 + (a, b)
        assert (second.step, second.action, second.immediate_reward) == (2, c, 1.0)
        assert list(p.purchase) == [False, True]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(3, 50), min_size=1, max_size=20), st.integers(0, 1000))
    def test_count_and_padding(self, lengths, seed):
        rng = Rng(seed)
        ss = [Session(str(i), [int(x) for x in rng.integers(1, 30, n)], [CLICK] * n)
              for i, n in enumerate(lengths)]
        p = generate_prompts(ss, RewardConfig())
        assert len(p) == sum(n - 1 for n in lengths)
        assert p.contexts.shape == (len(p), CONTEXT_LEN)
        assert np.all(p.actions != 0)
        k = 0
        for s in ss:
            for t in range(1, len(s)):
                ctx = p.contexts[k]
                keep = min(t, CONTEXT_LEN)
                assert list(ctx[CONTEXT_LEN - keep:]) == s.items[t - keep:t]
                assert np.all(ctx[:CONTEXT_LEN - keep] == 0)
                assert p.steps[k] == t
                k += 1

    def test_nonnegative_rewards(self):
        ss = synth_corpus(SynthSpec(vocab=10, sessions=50, seed=2))
        p = generate_prompts(ss, RewardConfig())
        assert np.all(p.rewards >= 0)

    def test_linear_time(self):
        cfg = RewardConfig()

        def timed(length, reps=3):
            ss = [Session(str(i), [1 + (j % 40) for j in range(length)], [CLICK] * length)
                  for i in range(200)]
            best = float("inf")
            for _ in range(reps):
                t0 = time.perf_counter()
                generate_prompts(ss, cfg)
                best = min(best, time.perf_counter() - t0)
            return best

        ratio = timed(400) / timed(200)
        assert ratio < 3.0, f"doubling session length multiplied runtime by {ratio:.2f}"

    def test_tsv_roundtrip(self, tmp_path):
        ss = synth_corpus(SynthSpec(vocab=10, sessions=5, seed=1))
        write_sessions(tmp_path / "s.tsv", ss)
        assert read_sessions(tmp_path / "s.tsv") == ss
        p = generate_prompts(ss, RewardConfig())
        write_prompts(tmp_path / "p.tsv", p)
        q = read_prompts(tmp_path / "p.tsv")
        for name in ("rewards", "contexts", "steps", "actions", "immediate", "purchase"):
            np.testing.assert_array_equal(getattr(p, name), getattr(q, name))


class TestStepAverages:
    def _prompts(self, steps, rewards):
        n = len(steps)
        return PromptSet(np.array(rewards, dtype=float), np.ones((n, CONTEXT_LEN), dtype=np.int64),
                         np.array(steps), np.ones(n, dtype=np.int64), np.zeros(n), np.zeros(n, bool))

    def test_mean(self):
        table = compute_step_reward_averages(self._prompts([1, 1], [0.35, 0.15]))
        assert table[1] == pytest.approx(0.25)

    def test_fallback_to_smaller_step(self):
        table = compute_step_reward_averages(self._prompts([1, 2], [0.9, 0.4]))
        assert table[5] == table[2] == pytest.approx(0.4)

    @given(st.permutations([0.1, 0.7, 0.3, 1e-9, 5.0]))
    def test_order_independent(self, values):
        table = compute_step_reward_averages(self._prompts([3] * 5, values))
        assert table[3] == compute_step_reward_averages(self._prompts([3] * 5, [0.1, 0.7, 0.3, 1e-9, 5.0]))[3]

    def test_empty(self):
        with pytest.raises(DataError):
            compute_step_reward_averages(PromptSet.empty())


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(vocab=20, sessions=30, seed=5)
        assert synth_corpus(spec) == synth_corpus(spec)

    def test_small_vocab(self):
        ss = synth_corpus(SynthSpec(vocab=4, sessions=1, min_len=5, max_len=5))
        assert len(ss[0]) == 5
        assert set(ss[0].items) <= {1, 2, 3, 4}

    def test_purchase_fraction_matches_bias(self):
        spec = SynthSpec(vocab=30, sessions=1000, min_len=11, max_len=11, purchase_bias=0.3, seed=4)
        ss = synth_corpus(spec)
        steps = [b for s in ss for b in s.behaviors[1:]]
        assert len(steps) == 10_000
        assert abs(steps.count(PURCHASE) / len(steps) - 0.3) < 0.02

    def test_next_item_is_function_of_item_and_tier(self):
        spec = SynthSpec(vocab=15, sessions=200, click_branches=1, seed=8)
        table = transition_table(spec)
        for s in synth_corpus(spec):
            for cur, nxt, b in zip(s.items, s.items[1:], s.behaviors[1:]):
                assert nxt == table[cur, 1 if b == PURCHASE else 0]

    @pytest.mark.parametrize("bad", [dict(vocab=3), dict(sessions=0), dict(min_len=5, max_len=4),
                                     dict(purchase_bias=1.5), dict(click_branches=0)])
    def test_inconsistent_spec(self, bad):
        with pytest.raises(ValueError):
            synth_corpus(SynthSpec(**bad))
