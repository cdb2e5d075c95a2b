"""Decoding strategies: degeneracies, the hand-enumerable beam instance,
monotonicity, sampling behavior."""

import math

import numpy as np
import pytest

from bridgeasr.config import DecodeConfig
from bridgeasr.decoding import beam, decode, greedy, sample


class ScriptedSession:
    """Toy session: a dict from prefix tuples to probability rows."""

    def __init__(self, table, n_tokens, eos_id=None, default=None):
        self.table = table
        self.n = n_tokens
        self.eos_id = eos_id if eos_id is not None else n_tokens
        self.default = default

    def _row(self, prefix):
        probs = self.table.get(prefix, self.default)
        if probs is None:
            # Unspecified prefixes end the sequence.
            probs = np.zeros(self.n + 1)
            probs[self.eos_id] = 1.0
        row = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.log(row)

    def begin(self):
        return self._row(()), ()

    def extend(self, state, token):
        new = state + (int(token),)
        return self._row(new), new


class RandomLmSession:
    """Fixed random logits per (prefix) via hashing; smooth enough to act
    like a tiny trained LM for degeneracy sweeps."""

    def __init__(self, seed, n_tokens=6, eos_id=None, eos_boost=0.0):
        self.seed = seed
        self.n = n_tokens
        self.eos_id = eos_id if eos_id is not None else n_tokens
        self.eos_boost = eos_boost

    def _row(self, prefix):
        rng = np.random.default_rng([self.seed, 77, *[p + 1 for p in prefix]])
        logits = rng.normal(0, 1.5, size=self.n + 1)
        logits[self.eos_id] += self.eos_boost + 0.4 * len(prefix)
        return logits - math.log(np.exp(logits).sum())

    def begin(self):
        return self._row(()), ()

    def extend(self, state, token):
        new = state + (int(token),)
        return self._row(new), new


def toy_two_step():
    # Step 1: P(A)=.5, P(B)=.45, P(C)=.05; after A: (.34,.33,.33);
    # after B: P(A)=.9, rest split. Two decode steps, no EOS mass.
    return ScriptedSession(
        {
            (): [0.5, 0.45, 0.05, 0.0],
            (0,): [0.34, 0.33, 0.33, 0.0],
            (1,): [0.9, 0.05, 0.05, 0.0],
            (2,): [0.4, 0.3, 0.3, 0.0],
        },
        n_tokens=3,
        default=[1 / 3, 1 / 3, 1 / 3, 0.0],
    )


def exhaustive_best(session, length):
    """Oracle: enumerate every sequence of `length` tokens, return the best."""
    best, best_seq = -np.inf, None
    def walk(prefix, state, lp_row, score):
        nonlocal best, best_seq
        if len(prefix) == length:
            if score > best:
                best, best_seq = score, prefix
            return
        for tok in range(session.n):
            if not np.isfinite(lp_row[tok]):
                continue
            row, st = session.extend(state, tok)
            walk(prefix + (tok,), st, row, score + lp_row[tok])
    row, st = session.begin()
    walk((), st, row, 0.0)
    return list(best_seq), best


class TestGreedy:
    def test_always_eos_gives_empty(self):
        s = ScriptedSession({}, n_tokens=3)
        assert greedy(s, DecodeConfig(max_new_tokens=8)) == []

    def test_deterministic(self):
        s = RandomLmSession(3)
        cfg = DecodeConfig(max_new_tokens=10)
        assert greedy(s, cfg) == greedy(s, cfg)

    def test_toy_instance(self):
        out = greedy(toy_two_step(), DecodeConfig(max_new_tokens=2))
        assert out == [0, 0]  # joint prob 0.5 * 0.34 = 0.17

    def test_respects_max_new_tokens(self):
        s = ScriptedSession({}, n_tokens=2, default=[1.0, 0.0, 0.0])
        assert len(greedy(s, DecodeConfig(max_new_tokens=5))) == 5


class TestBeam:
    def test_toy_instance_beam2_finds_ba(self):
        out = beam(toy_two_step(), DecodeConfig(strategy="beam", beam_size=2, max_new_tokens=2))
        assert out == [1, 0]  # joint prob 0.45 * 0.9 = 0.405 > 0.17

    def test_toy_instance_matches_exhaustive(self):
        session = toy_two_step()
        seq, _ = exhaustive_best(session, 2)
        assert beam(session, DecodeConfig(strategy="beam", beam_size=4, max_new_tokens=2)) == seq

    def test_beam1_equals_greedy_sweep(self):
        for seed in range(50):
            s = RandomLmSession(seed, eos_boost=0.8)
            cfg_g = DecodeConfig(max_new_tokens=12)
            cfg_b = DecodeConfig(strategy="beam", beam_size=1, max_new_tokens=12)
            assert beam(s, cfg_b) == greedy(s, cfg_g), f"seed {seed}"

    def test_all_eos_model_empty_any_beam(self):
        s = ScriptedSession({}, n_tokens=3)
        for b in (1, 2, 5):
            assert beam(s, DecodeConfig(strategy="beam", beam_size=b, max_new_tokens=6)) == []

    def test_score_monotone_in_beam_size(self):
        def joint_logprob(session, tokens):
            lp_row, state = session.begin()
            score = 0.0
            for tok in tokens:
                score += lp_row[tok]
                lp_row, state = session.extend(state, tok)
            return score + lp_row[session.eos_id]

        for seed in range(60):
            s = RandomLmSession(seed, eos_boost=1.0)
            scores = []
            for b in (1, 2, 3, 5):
                out = beam(s, DecodeConfig(strategy="beam", beam_size=b, max_new_tokens=10))
                scores.append(joint_logprob(s, out))
            for lo, hi in zip(scores, scores[1:]):
                assert hi >= lo - 1e-12, f"seed {seed}: {scores}"

    def test_finished_hypotheses_compete(self):
        # EOS right away (.6) vs a long tail: beam must keep the finished hyp.
        s = ScriptedSession(
            {(): [0.3, 0.1, 0.6], (0,): [0.9, 0.05, 0.05], (0, 0): [0.0, 0.0, 1.0]},
            n_tokens=2)
        out = beam(s, DecodeConfig(strategy="beam", beam_size=2, max_new_tokens=4))
        assert out == []  # P(eos)=.6 beats P(0,0,eos)=.3*.9*1


class TestSampling:
    def test_top_k_1_equals_greedy(self):
        for seed in range(50):
            s = RandomLmSession(seed, eos_boost=0.8)
            want = greedy(s, DecodeConfig(max_new_tokens=12))
            got = sample(s, DecodeConfig(strategy="top_k", top_k=1, seed=seed, max_new_tokens=12))
            assert got == want, f"seed {seed}"

    def test_nucleus_below_max_prob_equals_greedy(self):
        for seed in range(50):
            s = RandomLmSession(seed, eos_boost=0.8)
            want = greedy(s, DecodeConfig(max_new_tokens=12))
            # p=1e-9 is at or below any max probability.
            got = sample(s, DecodeConfig(strategy="nucleus", top_p=1e-9, seed=seed,
                                         max_new_tokens=12))
            assert got == want, f"seed {seed}"

    def test_seed_reproducibility(self):
        s = RandomLmSession(1)
        cfg = DecodeConfig(strategy="top_k", top_k=3, seed=12, max_new_tokens=10)
        assert sample(s, cfg) == sample(s, cfg)

    def test_seeds_differ_on_flat_distribution(self):
        # Uniform over 8 tokens, length 3: 100 seeds must not collapse.
        table = {}
        s = ScriptedSession(table, n_tokens=8, default=[1 / 8] * 8 + [0.0])

        def run(seed):
            cfg = DecodeConfig(strategy="top_k", top_k=8, seed=seed, max_new_tokens=3)
            return tuple(sample(s, cfg))

        outs = {run(seed) for seed in range(100)}
        assert len(outs) >= 50

    def test_nucleus_prefix_mass(self):
        # p=0.5 over (.4,.35,.25): smallest prefix reaching mass .5 is {0,1}.
        s = ScriptedSession({}, n_tokens=3, default=[0.4, 0.35, 0.25, 0.0])
        seen = set()
        for seed in range(60):
            out = sample(s, DecodeConfig(strategy="nucleus", top_p=0.5, seed=seed,
                                         max_new_tokens=1))
            seen.add(out[0])
        assert seen == {0, 1}

    def test_top_k_restriction(self):
        s = ScriptedSession({}, n_tokens=4, default=[0.4, 0.3, 0.2, 0.1, 0.0])
        seen = set()
        for seed in range(80):
            out = sample(s, DecodeConfig(strategy="top_k", top_k=2, seed=seed,
                                         max_new_tokens=1))
            seen.add(out[0])
        assert seen == {0, 1}


class TestDispatchAndTermination:
    def test_dispatch(self):
        s = toy_two_step()
        assert decode(s, DecodeConfig(strategy="greedy", max_new_tokens=2)) == [0, 0]
        assert decode(s, DecodeConfig(strategy="beam", beam_size=2, max_new_tokens=2)) == [1, 0]

    def test_all_strategies_terminate(self):
        s = ScriptedSession({}, n_tokens=3, default=[0.5, 0.3, 0.2, 0.0])  # never EOS
        for cfg in (DecodeConfig(max_new_tokens=7),
                    DecodeConfig(strategy="beam", beam_size=3, max_new_tokens=7),
                    DecodeConfig(strategy="top_k", top_k=2, seed=0, max_new_tokens=7),
                    DecodeConfig(strategy="nucleus", top_p=0.9, seed=0, max_new_tokens=7)):
            assert len(decode(s, cfg)) <= 7


class TestRealModelSessions:
    def test_greedy_on_trained_tiny_model(self):
        # Contract only: the session interface drives the real LM.
        from test_trainer import tiny_model, tone_dataset

        model = tiny_model(seed=21)
        wave = tone_dataset(1, seed=22)[0][0]
        prompt = model.prompt_for_wave(wave)
        session = model.decoder_session(prompt)
        out = decode(session, DecodeConfig(max_new_tokens=8))
        assert all(0 <= t < model.vocab.lm_size for t in out)
        v = model.vocab
        assert not any(t in (v.pad_id, v.unk_id, v.bos_id) for t in out)

    def test_beam1_equals_greedy_on_real_model(self):
        from test_trainer import tiny_model, tone_dataset

        model = tiny_model(seed=23)
        for i, (wave, _, _) in enumerate(tone_dataset(5, seed=24)):
            prompt = model.prompt_for_wave(wave)
            session = model.decoder_session(prompt)
            g = greedy(session, DecodeConfig(max_new_tokens=10))
            b = beam(session, DecodeConfig(strategy="beam", beam_size=1, max_new_tokens=10))
            assert g == b, f"utterance {i}"
