"""Shared test oracles, kept independent of the library implementations."""

from __future__ import annotations

import itertools

OP_HIT, OP_SUB, OP_DEL, OP_INS = 0, 1, 2, 3


def all_sequences(alphabet: tuple, max_len: int) -> list[tuple]:
    """Every sequence over ``alphabet`` with length 0..max_len."""
    seqs: list[tuple] = [()]
    frontier: list[tuple] = [()]
    for _ in range(max_len):
        frontier = [s + (a,) for s in frontier for a in alphabet]
        seqs.extend(frontier)
    return seqs


def edit_tables(alphabet: tuple, max_len: int) -> tuple[dict, dict]:
    """Tabulate min edit cost and tie-broken counts for every sequence pair.

    Processes pairs in increasing total length; each pair's last edit op is
    chosen as the (cost, op-rank) minimum over the three predecessors, which
    realizes the end-first preference hit > substitution > deletion >
    insertion. Returns (cost, counts) dicts keyed by (ref, hyp) tuples,
    counts as (H, S, D, I).
    """
    by_len: list[list[tuple]] = [[] for _ in range(max_len + 1)]
    for s in all_sequences(alphabet, max_len):
        by_len[len(s)].append(s)
    cost: dict = {((), ()): 0}
    counts: dict = {((), ()): (0, 0, 0, 0)}
    for total in range(1, 2 * max_len + 1):
        for nr in range(max(0, total - max_len), min(max_len, total) + 1):
            nh = total - nr
            for r in by_len[nr]:
                rp = r[:-1] if r else None
                for h in by_len[nh]:
                    # candidates in preference order for the pair's last op
                    if r and h:
                        hp = h[:-1]
                        if r[-1] == h[-1]:
                            c, parent, delta = cost[(rp, hp)], (rp, hp), (1, 0, 0, 0)
                        else:
                            c, parent, delta = cost[(rp, hp)] + 1, (rp, hp), (0, 1, 0, 0)
                        c_del = cost[(rp, h)] + 1
                        if c_del < c:
                            c, parent, delta = c_del, (rp, h), (0, 0, 1, 0)
                        c_ins = cost[(r, hp)] + 1
                        if c_ins < c:
                            c, parent, delta = c_ins, (r, hp), (0, 0, 0, 1)
                    elif r:
                        c, parent, delta = cost[(rp, h)] + 1, (rp, h), (0, 0, 1, 0)
                    else:
                        hp = h[:-1]
                        c, parent, delta = cost[(r, hp)] + 1, (r, hp), (0, 0, 0, 1)
                    key = (r, h)
                    cost[key] = c
                    ph, ps, pd, pi = counts[parent]
                    dh, ds, dd, di = delta
                    counts[key] = (ph + dh, ps + ds, pd + dd, pi + di)
    return cost, counts


def enumerate_best_alignment(ref: tuple, hyp: tuple) -> tuple[int, tuple[int, int, int, int]]:
    """Fully enumerate every monotone alignment and pick the preferred optimum.

    The preferred optimum minimizes (total errors, op sequence read from the
    end under rank hit < sub < del < ins). Exponential; only for tiny inputs.
    """
    best: tuple | None = None

    def walk(i: int, j: int, ops: list[int]) -> None:
        nonlocal best
        if i == len(ref) and j == len(hyp):
            errors = sum(1 for op in ops if op != OP_HIT)
            key = (errors, tuple(reversed(ops)))
            if best is None or key < best[0]:
                h = ops.count(OP_HIT)
                s = ops.count(OP_SUB)
                d = ops.count(OP_DEL)
                ins = ops.count(OP_INS)
                best = (key, (errors, (h, s, d, ins)))
            return
        if i < len(ref) and j < len(hyp):
            ops.append(OP_HIT if ref[i] == hyp[j] else OP_SUB)
            walk(i + 1, j + 1, ops)
            ops.pop()
        if i < len(ref):
            ops.append(OP_DEL)
            walk(i + 1, j, ops)
            ops.pop()
        if j < len(hyp):
            ops.append(OP_INS)
            walk(i, j + 1, ops)
            ops.pop()

    walk(0, 0, [])
    assert best is not None
    return best[1]


def random_token_pair(rng, alphabet_size: int, max_len: int) -> tuple[list[int], list[int]]:
    nr = int(rng.integers(0, max_len + 1))
    nh = int(rng.integers(0, max_len + 1))
    ref = rng.integers(0, alphabet_size, size=nr).tolist()
    hyp = rng.integers(0, alphabet_size, size=nh).tolist()
    return ref, hyp


def one_line_amer(rows: list[list[float]], t: int) -> float:
    return sum(rows[t][: t + 1]) / (t + 1)


def one_line_fwt(incft_diag: list[float], diag: list[float], t: int) -> float:
    return incft_diag[t] - diag[t]


def one_line_bwt(rows: list[list[float]], t: int) -> float:
    return sum(rows[i][i] - rows[t][i] for i in range(t)) / t


def one_line_im(diag: list[float], joint_diag: list[float], t: int) -> float:
    return diag[t] - joint_diag[t]
