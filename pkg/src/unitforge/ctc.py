"""Exact CTC: lattice loss with analytic gradient, collapse rules,
greedy / prefix-beam decoding, and a path-enumeration brute-force oracle.

Blank id is 0. The loss consumes log-probabilities (callers apply
log_softmax); the lattice is purely additive in log space. Structurally
unreachable lattice cells hold the NEG_INF sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InfeasibleAlignmentError, OracleError
from .tensor import NEG_INF, Tensor

BLANK = 0


@dataclass(frozen=True)
class UnitSequence:
    """Discrete speech-unit ids in [1, V); blank excluded."""

    units: tuple

    def __init__(self, units):
        units = tuple(int(u) for u in units)
        if any(u == BLANK for u in units):
            raise ConfigurationError("UnitSequence may not contain the blank id")
        if any(u < 0 for u in units):
            raise ConfigurationError("UnitSequence ids must be positive")
        object.__setattr__(self, "units", units)

    def __len__(self):
        return len(self.units)

    def __iter__(self):
        return iter(self.units)


def _as_units(target) -> tuple:
    if isinstance(target, UnitSequence):
        return target.units
    return UnitSequence(target).units


def collapse(alignment) -> UnitSequence:
    """Merge adjacent duplicates, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev:
            out.append(a)
        prev = a
    return UnitSequence([u for u in out if u != BLANK])


def min_frames(units: tuple) -> int:
    repeats = sum(1 for a, b in zip(units, units[1:]) if a == b)
    return len(units) + repeats


def extended_target(units: tuple) -> np.ndarray:
    ext = np.zeros(2 * len(units) + 1, dtype=np.int64)
    ext[1::2] = units
    return ext


@dataclass
class AlignmentLattice:
    """Log-space forward/backward tables over the blank-extended target."""

    extended_target: np.ndarray
    alpha: np.ndarray  # [T, 2|y|+1], emission at t included
    beta: np.ndarray   # [T, 2|y|+1], emission at t included
    log_z: float

    def dump(self, path):
        with open(path, "w") as fh:
            for row in self.alpha:
                fh.write("\t".join(f"{v:.17g}" for v in row) + "\n")


def _sanitize(table: np.ndarray) -> np.ndarray:
    out = table.copy()
    out[~np.isfinite(out)] = NEG_INF
    out[out < NEG_INF] = NEG_INF
    return out


def compute_lattice(log_probs: np.ndarray, target) -> AlignmentLattice:
    """Forward/backward DP; raises if the target cannot fit in T frames."""
    units = _as_units(target)
    t_len, _ = log_probs.shape
    need = min_frames(units)
    if t_len < need:
        raise InfeasibleAlignmentError(need, t_len)

    ext = extended_target(units)
    s_len = ext.shape[0]
    emit = log_probs[:, ext]  # [T, S]

    # skip transition s-2 -> s allowed when ext[s] is a label differing
    # from ext[s-2]
    can_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    ninf = -np.inf
    alpha = np.full((t_len, s_len), ninf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([ninf], prev[:-1]))
        acc = np.logaddexp(stay, step)
        skip = np.full(s_len, ninf)
        if s_len > 2:
            skip[2:] = prev[:-2]
        skip = np.where(can_skip, skip, ninf)
        alpha[t] = emit[t] + np.logaddexp(acc, skip)

    beta = np.full((t_len, s_len), ninf)
    beta[t_len - 1, s_len - 1] = emit[t_len - 1, s_len - 1]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = emit[t_len - 1, s_len - 2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [ninf]))
        acc = np.logaddexp(stay, step)
        skip = np.full(s_len, ninf)
        if s_len > 2:
            skip[:-2] = np.where(can_skip[2:], nxt[2:], ninf)
        beta[t] = emit[t] + np.logaddexp(acc, skip)

    if s_len > 1:
        log_z = np.logaddexp(alpha[t_len - 1, s_len - 1], alpha[t_len - 1, s_len - 2])
    else:
        log_z = alpha[t_len - 1, s_len - 1]

    return AlignmentLattice(
        extended_target=ext,
        alpha=_sanitize(alpha),
        beta=_sanitize(beta),
        log_z=float(log_z),
    )


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """-log sum over all alignments collapsing to ``target``.

    Gradient w.r.t. ``log_probs`` uses the alpha*beta posterior.
    """
    units = _as_units(target)
    lp = log_probs.data
    lattice = compute_lattice(lp, units)
    out = Tensor(-lattice.log_z)

    ext = lattice.extended_target
    t_len, v = lp.shape

    def bwd(g):
        # through-probability of lattice state (t, s), emission counted once
        occ = lattice.alpha + lattice.beta - lp[:, ext] - lattice.log_z
        occ[lattice.alpha <= NEG_INF] = -np.inf
        occ[lattice.beta <= NEG_INF] = -np.inf
        post = np.exp(occ)
        grad = np.zeros((t_len, v))
        for s, label in enumerate(ext):
            grad[:, label] += post[:, s]
        return [(log_probs, -float(np.asarray(g).reshape(())) * grad)]

    return T.record_custom("ctc_loss", out, bwd, log_probs)


# ---------------------------------------------------------------------------
# oracles and decoding


def _all_paths(t_len: int, v: int) -> np.ndarray:
    if v ** t_len > 10 ** 6:
        raise OracleError(f"brute force too large: {v}^{t_len} paths")
    return np.array(list(product(range(v), repeat=t_len)), dtype=np.int64)


def brute_force_marginals(log_probs: np.ndarray) -> dict:
    """Enumerate every alignment; returns {collapsed tuple: log P(y)}."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, v = lp.shape
    paths = _all_paths(t_len, v)
    scores = lp[np.arange(t_len), paths].sum(axis=1)
    marginals: dict[tuple, float] = {}
    for path, score in zip(paths, scores):
        key = collapse(path).units
        if key in marginals:
            marginals[key] = np.logaddexp(marginals[key], score)
        else:
            marginals[key] = float(score)
    return marginals


def ctc_brute_force(log_probs, target) -> float:
    """Negative log marginal by explicit path enumeration (V^T <= 1e6)."""
    units = _as_units(target)
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    marginals = brute_force_marginals(lp)
    return -marginals.get(units, -np.inf)


def greedy_decode(log_probs):
    """Per-frame argmax alignment (exact best path); ties -> smaller id."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    alignment = [int(i) for i in lp.argmax(axis=1)]
    return collapse(alignment), alignment


def prefix_beam_decode(log_probs, beam: int) -> UnitSequence:
    """Prefix beam search over collapsed sequences maximizing marginal P(y)."""
    if beam < 1:
        raise ConfigurationError("prefix_beam_decode: beam must be >= 1")
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_len, v = lp.shape
    ninf = -np.inf
    # prefix -> [log P(prefix, ends in blank), log P(prefix, ends in label)]
    beams = {(): [0.0, ninf]}
    for t in range(t_len):
        nxt: dict[tuple, list] = {}

        def bump(prefix, which, value):
            cell = nxt.setdefault(prefix, [ninf, ninf])
            cell[which] = np.logaddexp(cell[which], value)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            for c in range(v):
                p = lp[t, c]
                if c == BLANK:
                    bump(prefix, 0, p + total)
                elif prefix and c == prefix[-1]:
                    bump(prefix, 1, p + pnb)
                    bump(prefix + (c,), 1, p + pb)
                else:
                    bump(prefix + (c,), 1, p + total)
        ranked = sorted(
            nxt.items(),
            key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]),
        )
        beams = dict(ranked[:beam])
    best = max(
        beams.items(),
        key=lambda kv: (np.logaddexp(kv[1][0], kv[1][1]), tuple(-u for u in kv[0])),
    )
    return UnitSequence(best[0])
