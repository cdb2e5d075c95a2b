"""Recognition scoring: normalization, Levenshtein, corpus-pooled CER,
length-group breakdown, edit-distance distribution, real-time factor."""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field

import numpy as np


def normalize_text(s: str) -> str:
    """Strip punctuation, symbols and whitespace; keep letters and digits.

    Idempotent: category membership is stable under removal.
    """
    out = []
    for ch in s:
        if ch.isspace():
            continue
        if unicodedata.category(ch)[0] in ("P", "S", "Z"):
            continue
        out.append(ch)
    return "".join(out)


def levenshtein(a: str, b: str) -> int:
    """Minimum unit-cost insert/delete/substitute count, two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(
                prev[j] + 1,                       # delete
                cur[j - 1] + 1,                    # insert
                prev[j - 1] + (ca != cb),          # substitute / match
            ))
        prev = cur
    return prev[-1]


@dataclass
class CerResult:
    cer: float
    distance_sum: int
    ref_len_sum: int
    distances: list[int] = field(default_factory=list)
    excluded: int = 0


def cer(refs, hyps) -> CerResult:
    """Corpus-pooled CER: summed distance over summed reference length.

    Reference/hypothesis pairs are normalized first; pairs whose normalized
    reference is empty are excluded and counted as warnings.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    dist_sum = 0
    len_sum = 0
    distances = []
    excluded = 0
    for ref, hyp in zip(refs, hyps):
        r = normalize_text(ref)
        h = normalize_text(hyp)
        if not r:
            excluded += 1
            distances.append(None)
            continue
        d = levenshtein(r, h)
        distances.append(d)
        dist_sum += d
        len_sum += len(r)
    value = dist_sum / len_sum if len_sum else 0.0
    return CerResult(cer=value, distance_sum=dist_sum, ref_len_sum=len_sum,
                     distances=distances, excluded=excluded)


def rtf(decode_seconds, audio_seconds) -> float:
    """Total decode wall time over total audio duration."""
    if len(decode_seconds) != len(audio_seconds):
        raise ValueError(f"{len(decode_seconds)} timings vs {len(audio_seconds)} durations")
    if any(a <= 0 for a in audio_seconds):
        raise ValueError("audio durations must be positive")
    return float(sum(decode_seconds)) / float(sum(audio_seconds))


def _quartiles(values) -> dict:
    if not values:
        return {"q1": 0.0, "median": 0.0, "q3": 0.0, "max": 0}
    arr = np.asarray(sorted(values), dtype=np.float64)
    return {
        "q1": float(np.percentile(arr, 25)),
        "median": float(np.percentile(arr, 50)),
        "q3": float(np.percentile(arr, 75)),
        "max": int(arr[-1]),
    }


GROUPS = ("short", "mid", "long")


@dataclass
class EvalReport:
    overall_cer: float
    group_cer: dict
    group_counts: dict
    edit_distance: dict
    n_utts: int
    excluded: int
    rtf: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [
            f"{'group':<8} {'count':>6} {'CER':>8}",
            f"{'all':<8} {self.n_utts:>6} {self.overall_cer:>8.4f}",
        ]
        for g in GROUPS:
            c = self.group_cer[g]
            cer_txt = f"{c:>8.4f}" if c is not None else f"{'n/a':>8}"
            lines.append(f"{g:<8} {self.group_counts[g]:>6} {cer_txt}")
        ed = self.edit_distance
        lines.append(
            f"edit distance quartiles: q1={ed['q1']:g} median={ed['median']:g} "
            f"q3={ed['q3']:g} max={ed['max']}"
        )
        if self.rtf is not None:
            lines.append(f"RTF: {self.rtf:.4f}")
        if self.excluded:
            lines.append(f"warning: {self.excluded} empty normalized references excluded")
        return "\n".join(lines)


def build_report(refs, hyps, durations_s, decode_seconds=None,
                 boundaries=(5.1, 15.9), rtf_n=100) -> EvalReport:
    """Full evaluation: pooled CER, length groups, distances, optional RTF.

    Groups partition on audio duration: short < boundaries[0] <= mid <
    boundaries[1] <= long. RTF uses the first `rtf_n` utterances.
    """
    if len(durations_s) != len(refs):
        raise ValueError(f"{len(durations_s)} durations vs {len(refs)} references")
    overall = cer(refs, hyps)
    lo, hi = boundaries

    def group_of(d):
        if d < lo:
            return "short"
        return "mid" if d < hi else "long"

    members = {g: [] for g in GROUPS}
    for i, d in enumerate(durations_s):
        members[group_of(d)].append(i)
    group_cer = {}
    group_counts = {}
    for g in GROUPS:
        idx = members[g]
        group_counts[g] = len(idx)
        if idx:
            res = cer([refs[i] for i in idx], [hyps[i] for i in idx])
            group_cer[g] = res.cer if res.ref_len_sum else None
        else:
            group_cer[g] = None
    ratio = None
    if decode_seconds is not None:
        n = min(rtf_n, len(decode_seconds))
        ratio = rtf(decode_seconds[:n], durations_s[:n])
    return EvalReport(
        overall_cer=overall.cer,
        group_cer=group_cer,
        group_counts=group_counts,
        edit_distance=_quartiles([d for d in overall.distances if d is not None]),
        n_utts=len(refs),
        excluded=overall.excluded,
        rtf=ratio,
    )
