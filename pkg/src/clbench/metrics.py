"""Match Error Rate scoring and the continual-learning metric suite.

MER is computed from a minimum-edit alignment with unit costs for
substitutions, deletions and insertions::

    mer = (S + D + I) / (H + S + D + I)

which is bounded in [0, 1] (the denominator counts every aligned slot).
Among alignments with minimal S+D+I, counts are disambiguated by a fixed
backtrace preference: hit > substitution > deletion > insertion, applied
from the end of the sequences backwards.

The CL metrics operate on a lower-triangular MER matrix ``M[t][i]`` (model
after episode t, scored on episode i's test split) plus two reference
diagonals (plain incremental fine-tuning and joint fine-tuning):

* ``amer``  - mean of row t (optionally excluding episode 0),
* ``fwt``   - incremental-baseline diagonal minus the strategy diagonal,
* ``bwt``   - mean change on past episodes (negative = forgetting),
* ``im``    - strategy diagonal minus the joint diagonal (plasticity gap).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

_PAD = -1


@dataclass(frozen=True)
class MerScore:
    """Alignment counts for one scored unit (utterance or pooled corpus)."""

    hits: int
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def mer(self) -> float:
        denom = self.hits + self.errors
        return self.errors / denom if denom else 0.0

    def __add__(self, other: "MerScore") -> "MerScore":
        return MerScore(
            self.hits + other.hits,
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
        )


def mer(reference: Sequence, hypothesis: Sequence) -> MerScore:
    """Score one hypothesis against one reference.

    Tokens only need to support equality. Counts satisfy
    ``H + S + D == len(reference)`` and ``H + S + I == len(hypothesis)``.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    nr, nh = len(ref), len(hyp)
    if nr == 0 and nh == 0:
        return MerScore(0, 0, 0, 0)

    d = [[0] * (nh + 1) for _ in range(nr + 1)]
    for i in range(1, nr + 1):
        d[i][0] = i
    for j in range(1, nh + 1):
        d[0][j] = j
    for i in range(1, nr + 1):
        ri = ref[i - 1]
        prev = d[i - 1]
        row = d[i]
        for j in range(1, nh + 1):
            best = prev[j - 1] + (ri != hyp[j - 1])
            up = prev[j] + 1
            if up < best:
                best = up
            left = row[j - 1] + 1
            if left < best:
                best = left
            row[j] = best

    hits = subs = dels = ins = 0
    i, j = nr, nh
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            hits += 1
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and ref[i - 1] != hyp[j - 1] and d[i][j] == d[i - 1][j - 1] + 1:
            subs += 1
            i -= 1
            j -= 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return MerScore(hits, subs, dels, ins)


def combine(scores: Iterable[MerScore]) -> MerScore:
    """Pool utterance scores into one corpus-level score (sum counts, one ratio)."""
    total = MerScore(0, 0, 0, 0)
    for s in scores:
        total = total + s
    return total


_PACK_HIT = np.int64(1) << 48
_PACK_SUB = np.int64(1) << 32
_PACK_DEL = np.int64(1) << 16
_PACK_INS = np.int64(1)
_PACK_MASK = np.int64(0xFFFF)


def _dp_group(refs: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    """Vectorized DP over a group of pairs with identical shapes.

    refs: (B, R) int array, hyps: (B, N). Returns (B, 4) counts [H, S, D, I],
    using the same backtrace preference as :func:`mer` (hit > sub > del > ins),
    realized by selecting each cell's predecessor with that preference. The
    four counts travel packed into one int64 per cell (16 bits each, so
    sequence lengths must stay below 65536).
    """
    b, nr = refs.shape
    nh = hyps.shape[1]
    if nr >= 0xFFFF or nh >= 0xFFFF:
        raise ValueError("sequences longer than 65535 tokens are not supported")

    prev_d = np.tile(np.arange(nh + 1, dtype=np.int64), (b, 1))
    prev_p = np.tile(np.arange(nh + 1, dtype=np.int64) * _PACK_INS, (b, 1))
    for i in range(1, nr + 1):
        cur_d = np.empty((b, nh + 1), dtype=np.int64)
        cur_p = np.empty((b, nh + 1), dtype=np.int64)
        cur_d[:, 0] = i
        cur_p[:, 0] = i * _PACK_DEL
        ri = refs[:, i - 1]
        for j in range(1, nh + 1):
            eq = ri == hyps[:, j - 1]
            c_diag = prev_d[:, j - 1] + (~eq)
            c_del = prev_d[:, j] + 1
            c_ins = cur_d[:, j - 1] + 1
            best = np.minimum(np.minimum(c_diag, c_del), c_ins)
            diag_sel = c_diag == best
            del_sel = ~diag_sel & (c_del == best)
            cur_d[:, j] = best
            diag_pack = prev_p[:, j - 1] + np.where(eq, _PACK_HIT, _PACK_SUB)
            cur_p[:, j] = np.where(
                diag_sel, diag_pack, np.where(del_sel, prev_p[:, j] + _PACK_DEL, cur_p[:, j - 1] + _PACK_INS)
            )
        prev_d, prev_p = cur_d, cur_p
    packed = prev_p[:, nh]
    counts = np.empty((b, 4), dtype=np.int64)
    counts[:, 0] = packed >> 48
    counts[:, 1] = (packed >> 32) & _PACK_MASK
    counts[:, 2] = (packed >> 16) & _PACK_MASK
    counts[:, 3] = packed & _PACK_MASK
    return counts


def mer_many(references: Sequence[Sequence[int]], hypotheses: Sequence[Sequence[int]]) -> list[MerScore]:
    """Score many integer-token pairs; equivalent to calling :func:`mer` per pair.

    Pairs are grouped by (reference length, hypothesis length) and each group
    is scored in one vectorized DP sweep.
    """
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses must have equal length")
    results: list[MerScore | None] = [None] * len(references)
    groups: dict[tuple[int, int], list[int]] = {}
    for idx, (r, h) in enumerate(zip(references, hypotheses)):
        groups.setdefault((len(r), len(h)), []).append(idx)
    for (nr, nh), idxs in groups.items():
        if nr == 0 and nh == 0:
            for idx in idxs:
                results[idx] = MerScore(0, 0, 0, 0)
            continue
        if nr == 0:
            for idx in idxs:
                results[idx] = MerScore(0, 0, 0, nh)
            continue
        if nh == 0:
            for idx in idxs:
                results[idx] = MerScore(0, 0, nr, 0)
            continue
        refs = np.array([np.asarray(references[idx]) for idx in idxs], dtype=np.int64)
        hyps = np.array([np.asarray(hypotheses[idx]) for idx in idxs], dtype=np.int64)
        counts = _dp_group(refs, hyps)
        for row, idx in enumerate(idxs):
            results[idx] = MerScore(*(int(x) for x in counts[row]))
    return results  # type: ignore[return-value]


def mer_frames(refs: np.ndarray, hyps: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Score equal-length token pairs stored as padded 2-D arrays.

    refs/hyps: (B, T) integer arrays; pair i uses the first ``lengths[i]``
    positions of each. Returns (B, 4) counts [H, S, D, I]. All pairs run in a
    single DP by padding both sides of pair i with the same sentinel beyond
    its length; the padded suffix aligns as hits, which are subtracted out,
    leaving exactly the counts of the unpadded pair.
    """
    refs = np.asarray(refs, dtype=np.int64)
    hyps = np.asarray(hyps, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    b, t = refs.shape
    if hyps.shape != (b, t) or lengths.shape != (b,):
        raise ValueError("shape mismatch between refs, hyps and lengths")
    if np.any(refs < 0) or np.any(hyps < 0):
        raise ValueError("tokens must be nonnegative (the pad sentinel is negative)")
    mask = np.arange(t) >= lengths[:, None]
    refs = np.where(mask, _PAD, refs)
    hyps = np.where(mask, _PAD, hyps)
    counts = _dp_group(refs, hyps)
    counts[:, 0] -= t - lengths
    return counts


class MerMatrix:
    """Lower-triangular MER values: row t holds entries for episodes 0..t."""

    def __init__(self, rows: Sequence[Sequence[float]]):
        self.rows: list[list[float]] = [list(map(float, row)) for row in rows]
        for t, row in enumerate(self.rows):
            if len(row) != t + 1:
                raise ValidationError(f"MER matrix row {t} must have {t + 1} entries, got {len(row)}")
            for value in row:
                if not (0.0 <= value <= 1.0):
                    raise ValidationError(f"MER value out of [0, 1] in row {t}: {value}")

    @property
    def tau(self) -> int:
        return len(self.rows) - 1

    def value(self, t: int, i: int) -> float:
        return self.rows[t][i]

    def diagonal(self) -> list[float]:
        return [self.rows[t][t] for t in range(len(self.rows))]

    def to_jsonable(self) -> dict:
        return {"tau": self.tau, "rows": self.rows}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "MerMatrix":
        return cls(obj["rows"])

    def __eq__(self, other) -> bool:
        return isinstance(other, MerMatrix) and self.rows == other.rows


@dataclass
class ReferenceDiagonals:
    """Diagonal MER of the two baseline chains needed by FWT and IM."""

    incft: list[float]
    jointft: list[float]

    def to_jsonable(self) -> dict:
        return {"incft": self.incft, "jointft": self.jointft}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "ReferenceDiagonals":
        return cls(list(map(float, obj["incft"])), list(map(float, obj["jointft"])))


def _check_t(t: int, tau: int, minimum: int = 0) -> None:
    if not (minimum <= t <= tau):
        raise ValidationError(f"episode index {t} out of range [{minimum}, {tau}]")


def amer(matrix: MerMatrix, t: int, include_base: bool = True) -> float:
    """Average MER of the episode-t model over all seen episode test sets.

    ``include_base=False`` drops episode 0 from the average (undefined at t=0).
    """
    _check_t(t, matrix.tau)
    row = matrix.rows[t]
    if include_base:
        return sum(row) / (t + 1)
    if t == 0:
        raise ValidationError("amer with include_base=False is undefined at t=0")
    return sum(row[1:]) / t


def fwt(strategy_diag: Sequence[float], refs: ReferenceDiagonals, t: int) -> float:
    """Forward transfer: how much the strategy beats plain incremental FT at t."""
    _check_t(t, len(strategy_diag) - 1, minimum=1)
    return refs.incft[t] - strategy_diag[t]


def bwt(matrix: MerMatrix, t: int) -> float:
    """Backward transfer at t; negative values signal forgetting."""
    _check_t(t, matrix.tau, minimum=1)
    return sum(matrix.rows[i][i] - matrix.rows[t][i] for i in range(t)) / t


def im(strategy_diag: Sequence[float], refs: ReferenceDiagonals, t: int) -> float:
    """Intransigence: gap to the jointly trained model on episode t."""
    _check_t(t, len(strategy_diag) - 1)
    return strategy_diag[t] - refs.jointft[t]


def metric_series(matrix: MerMatrix, refs: ReferenceDiagonals, include_base: bool = True) -> list[dict]:
    """Per-episode table of all four metrics (FWT/BWT are None at t=0)."""
    diag = matrix.diagonal()
    out = []
    for t in range(matrix.tau + 1):
        out.append(
            {
                "episode": t,
                "amer": amer(matrix, t, include_base=include_base) if (include_base or t > 0) else None,
                "fwt": fwt(diag, refs, t) if t >= 1 else None,
                "bwt": bwt(matrix, t) if t >= 1 else None,
                "im": im(diag, refs, t),
            }
        )
    return out
