"""CTC loss against an exhaustive alignment-enumeration oracle."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgeasr import tensor as T
from bridgeasr.ctc import (InfeasibleAlignmentError, ctc_collapse, ctc_frame_labels,
                           ctc_loss, min_frames)
from conftest import assert_grad_close, fd_gradient


def collapse_path(path, blank):
    out = []
    prev = None
    for lab in path:
        if lab != prev and lab != blank:
            out.append(lab)
        prev = lab
    return out


def brute_force_ctc(probs, target, blank):
    """Sum P(path) over every frame labeling that collapses to target.

    Independent of the recursion under test: enumerates all (V+1)^T paths.
    """
    t_frames, n_classes = probs.shape
    assert n_classes ** t_frames <= 20000
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=t_frames):
        if collapse_path(path, blank) == list(target):
            p = 1.0
            for t, lab in enumerate(path):
                p *= probs[t, lab]
            total += p
    return total


def random_log_probs(rng, t_frames, n_classes):
    logits = rng.normal(size=(t_frames, n_classes))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return logp


def test_single_frame_single_alignment():
    # T=1, target=[a], p(a)=0.4: only one path.
    logp = np.log(np.array([[0.4, 0.6]]))  # columns: a, blank(id=1)
    loss = ctc_loss(T.Tensor(logp), [0], blank=1)
    assert loss.item() == pytest.approx(-math.log(0.4), abs=1e-6)


def test_two_frame_hand_worked():
    # p1=(blank .6, a .4), p2=(blank .3, a .7); paths aa, a-, -a.
    logp = np.log(np.array([[0.4, 0.6], [0.7, 0.3]]))
    loss = ctc_loss(T.Tensor(logp), [0], blank=1)
    expected = 0.4 * 0.7 + 0.4 * 0.3 + 0.6 * 0.7
    assert expected == pytest.approx(0.82)
    assert loss.item() == pytest.approx(-math.log(expected), abs=1e-6)
    assert loss.item() == pytest.approx(0.19845, abs=1e-4)


def test_empty_target_all_blank():
    logp = np.log(np.array([[0.4, 0.6], [0.7, 0.3]]))
    loss = ctc_loss(T.Tensor(logp), [], blank=1)
    assert loss.item() == pytest.approx(-math.log(0.6 * 0.3), abs=1e-6)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 50:
        t_frames = int(rng.integers(1, 7))
        v = int(rng.integers(1, 5))
        y_len = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(0, v, size=y_len)]
        if t_frames < min_frames(target):
            continue
        logp = random_log_probs(rng, t_frames, v + 1)
        expected = brute_force_ctc(np.exp(logp), target, blank=v)
        got = ctc_loss(T.Tensor(logp), target, blank=v).item()
        rel = abs(math.exp(-got) - expected) / expected
        assert rel <= 1e-6, f"T={t_frames} V={v} y={target}: {math.exp(-got)} vs {expected}"
        checked += 1


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for seed in range(8):
        r = np.random.default_rng(seed)
        t_frames, v = 5, 3
        target = [0, 1] if seed % 2 else [2]
        logits = r.normal(size=(t_frames, v + 1))

        def loss_fn():
            with T.no_grad():
                lp = T.log_softmax(T.Tensor(logits), axis=-1)
                return float(ctc_loss(lp, target, blank=v).data)

        x = T.Tensor(logits, requires_grad=True)
        loss = ctc_loss(T.log_softmax(x, axis=-1), target, blank=v)
        loss.backward()
        fd = fd_gradient(loss_fn, [logits])[0]
        assert_grad_close(x.grad, fd, rtol=1e-4)


def test_permutation_equivariance():
    # Consistently relabeling non-blank ids leaves the loss unchanged.
    rng = np.random.default_rng(11)
    v = 4
    logp = random_log_probs(rng, 6, v + 1)
    target = [0, 2, 1]
    base = ctc_loss(T.Tensor(logp), target, blank=v).item()
    perm = [2, 3, 0, 1]  # id i -> perm[i]
    logp_perm = logp.copy()
    for i, pi in enumerate(perm):
        logp_perm[:, pi] = logp[:, i]
    relabeled = [perm[y] for y in target]
    assert ctc_loss(T.Tensor(logp_perm), relabeled, blank=v).item() == pytest.approx(base, rel=1e-6)


def test_infeasible_raises_not_inf():
    logp = random_log_probs(np.random.default_rng(0), 2, 3)
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(T.Tensor(logp), [0, 1, 0], blank=2)
    # Repeats need a separating blank: 'aa' needs 3 frames.
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(T.Tensor(logp), [0, 0], blank=2)


def test_blank_in_target_rejected():
    logp = random_log_probs(np.random.default_rng(0), 4, 3)
    with pytest.raises(ValueError):
        ctc_loss(T.Tensor(logp), [2], blank=2)


class TestFrameLabels:
    def test_uniform_ties_to_zero(self):
        logp = np.zeros((3, 4))
        assert list(ctc_frame_labels(logp)) == [0, 0, 0]

    def test_one_hot_rows(self):
        logp = np.full((3, 4), -10.0)
        for t, lab in enumerate([2, 0, 3]):
            logp[t, lab] = 0.0
        assert list(ctc_frame_labels(logp)) == [2, 0, 3]

    def test_pattern(self):
        # Rows favoring blank, a, a, blank, b with blank=2, a=0, b=1.
        logp = np.array([
            [0.1, 0.1, 0.8],
            [0.7, 0.2, 0.1],
            [0.9, 0.05, 0.05],
            [0.2, 0.1, 0.7],
            [0.1, 0.8, 0.1],
        ])
        assert list(ctc_frame_labels(np.log(logp))) == [2, 0, 0, 2, 1]


class TestCollapse:
    def test_all_blank(self):
        assert ctc_collapse([2, 2, 2], blank=2) == []

    def test_blank_separates_repeats(self):
        assert ctc_collapse([0, 0, 2, 0], blank=2) == [0, 0]

    def test_mixed(self):
        assert ctc_collapse([2, 0, 0, 2, 1], blank=2) == [0, 1]

    @given(st.lists(st.integers(0, 3), max_size=30))
    @settings(max_examples=80)
    def test_never_contains_blank(self, labels):
        assert 3 not in ctc_collapse(labels, blank=3)

    @given(st.lists(st.integers(0, 3), max_size=30))
    @settings(max_examples=80)
    def test_matches_reference_collapse(self, labels):
        assert ctc_collapse(labels, blank=3) == collapse_path(labels, 3)
