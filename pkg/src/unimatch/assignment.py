"""Shape-to-universe assignments: Sinkhorn, hardening, composition, cycle checks."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, ParseError
from .fmap import PointMap

DEFAULT_TAU = 0.2
DEFAULT_ITERS = 10


@dataclass(eq=False)
class SoftAssignment:
    log_P: torch.Tensor  # [n, d]
    tau: float = DEFAULT_TAU
    iters: int = DEFAULT_ITERS

    @property
    def P(self) -> torch.Tensor:
        return self.log_P.exp()

    @property
    def shape(self):
        return tuple(self.log_P.shape)


def sinkhorn(logits, tau: float = DEFAULT_TAU, iters: int = DEFAULT_ITERS) -> SoftAssignment:
    """Soft assignment with rows summing to 1 and columns summing to at most 1.

    Log-domain Sinkhorn on the logits augmented with a slack row that absorbs
    the ``d - n`` unused universe mass (row targets 1 and ``d - n``, column
    targets 1). ``iters`` rounds of row then column normalization, a final row
    step, then :func:`_restore_feasibility` removes the residual column excess
    left by truncating the iteration.
    """
    logits = torch.as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("logits must be a matrix")
    n, d = logits.shape
    if d < n:
        raise DimensionError(f"universe size d={d} smaller than vertex count n={n}")
    if tau <= 0 or iters < 1:
        raise DimensionError("tau must be positive and iters >= 1")
    z = logits / tau
    log_rows = logits.new_zeros(n)
    if d > n:
        z = torch.cat([z, logits.new_zeros(1, d)], dim=0)
        log_rows = torch.cat([log_rows, log_rows.new_full((1,), float(np.log(d - n)))])
    for _ in range(iters):
        z = z - torch.logsumexp(z, dim=1, keepdim=True) + log_rows[:, None]
        z = z - torch.logsumexp(z, dim=0, keepdim=True)
    z = z[:n] - torch.logsumexp(z[:n], dim=1, keepdim=True)
    return SoftAssignment(_restore_feasibility(z), tau=tau, iters=iters)


def _restore_feasibility(log_P: torch.Tensor) -> torch.Tensor:
    """Map a row-stochastic matrix into {rows = 1, columns <= 1}.

    Overfull columns are scaled down to 1; each row's lost mass is then
    spread over the spare column capacity in proportion to that capacity.
    Total capacity ``d - sum(P)`` is at least the total deficit because
    ``d >= n``, so no column is pushed back above 1.
    """
    col = torch.logsumexp(log_P, dim=0, keepdim=True)
    if bool((col <= 1e-12).all()):
        return log_P
    P = (log_P - col.clamp_min(0.0)).exp()
    deficit = (1.0 - P.sum(dim=1, keepdim=True)).clamp_min(0.0)
    capacity = (1.0 - P.sum(dim=0, keepdim=True)).clamp_min(0.0)
    total = capacity.sum()
    if float(total.detach()) <= 0.0:
        return P.log()
    P = P + deficit * capacity / total
    return P.clamp_min(1e-300).log()


@dataclass(frozen=True, eq=False)
class HardAssignment:
    """Injective vertex-to-universe labelling."""

    universe_class: np.ndarray
    d: int
    shape_id: str = ""

    def __post_init__(self):
        c = np.asarray(self.universe_class, dtype=np.int64)
        if np.any((c < 0) | (c >= self.d)):
            raise DimensionError("universe class out of range")
        if len(np.unique(c)) != len(c):
            raise DimensionError("assignment is not injective")
        object.__setattr__(self, "universe_class", c)

    @property
    def n(self) -> int:
        return len(self.universe_class)

    def inverse(self) -> np.ndarray:
        """For every universe class, the vertex holding it or -1."""
        inv = np.full(self.d, -1, dtype=np.int64)
        inv[self.universe_class] = np.arange(self.n)
        return inv


def _as_numpy(P) -> np.ndarray:
    if isinstance(P, SoftAssignment):
        P = P.P
    if isinstance(P, torch.Tensor):
        P = P.detach().cpu().numpy()
    return np.asarray(P, dtype=np.float64)


def harden(soft, method: str = "greedy", shape_id: str = "") -> HardAssignment:
    """Discretize a soft assignment into an injective labelling.

    ``greedy`` visits vertices by decreasing peak probability and gives each
    its best class not yet taken. ``hungarian`` solves the linear assignment
    exactly (meant for n <= 512).
    """
    P = _as_numpy(soft)
    n, d = P.shape
    if d < n:
        raise DimensionError(f"universe size d={d} smaller than vertex count n={n}")
    if method == "hungarian":
        rows, cols = linear_sum_assignment(P, maximize=True)
        out = np.empty(n, dtype=np.int64)
        out[rows] = cols
        return HardAssignment(out, d, shape_id)
    if method != "greedy":
        raise ValueError(f"unknown hardening method {method!r}")
    order = np.argsort(-P.max(axis=1), kind="stable")
    free = np.ones(d, dtype=bool)
    out = np.empty(n, dtype=np.int64)
    for i in order:
        row = np.where(free, P[i], -np.inf)
        c = int(np.argmax(row))
        out[i] = c
        free[c] = False
    return HardAssignment(out, d, shape_id)


def compose_pairwise(hx: HardAssignment, hy: HardAssignment) -> PointMap:
    """Pairwise map X -> Y through the shared universe (``Pi_x Pi_y^T``)."""
    if hx.d != hy.d:
        raise DimensionError(f"universe sizes differ: {hx.d} vs {hy.d}")
    target = hy.inverse()[hx.universe_class]
    return PointMap(target, hy.n, hx.shape_id, hy.shape_id)


def soft_pairwise(Px: torch.Tensor, Py: torch.Tensor) -> torch.Tensor:
    """Differentiable soft pairwise map ``P_x P_y^T``."""
    return Px @ Py.T


@dataclass(frozen=True)
class Violation:
    x: str
    y: str
    z: str
    vertex: int
    direct: int
    composed: int


@dataclass
class CycleReport:
    triplets: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self):
        for v in self.violations:
            yield f"{v.x} -> {v.y} -> {v.z} vertex={v.vertex} direct={v.direct} composed={v.composed}"


def check_cycle_consistency(maps: dict) -> CycleReport:
    """Check ``Pi_xz = Pi_xy Pi_yz`` for every ordered triplet of distinct shapes.

    ``maps[(a, b)]`` is the :class:`PointMap` from shape ``a`` to shape ``b``.
    The check is restricted to vertices of X that are matched in Y; a vertex
    whose universe class is absent from Y carries no composed match to compare.
    """
    ids = sorted({a for a, _ in maps} | {b for _, b in maps})
    report = CycleReport()
    for x, y, z in itertools.permutations(ids, 3):
        if (x, y) not in maps or (y, z) not in maps or (x, z) not in maps:
            continue
        report.triplets += 1
        composed = maps[(x, y)].then(maps[(y, z)]).target
        direct = maps[(x, z)].target
        through = maps[(x, y)].matched
        bad = np.flatnonzero(through & (composed != direct))
        report.violations.extend(
            Violation(x, y, z, int(i), int(direct[i]), int(composed[i])) for i in bad
        )
    return report


# ---------------------------------------------------------------------------
# text files


def save_pointmap(pm: PointMap, path, d: int | None = None) -> None:
    header = f"source={pm.source_id} target={pm.target_id} n_target={pm.n_target}"
    if d is not None:
        header += f" d={d}"
    np.savetxt(path, pm.target, fmt="%d", header=header)


def _parse_header(path: Path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)


def load_pointmap(path) -> PointMap:
    path = Path(path)
    meta = _parse_header(path)
    try:
        target = np.loadtxt(path, dtype=np.int64, ndmin=1)
        n_target = int(meta.get("n_target", target.max() + 1))
    except ValueError as exc:
        raise ParseError(f"{path}: malformed correspondence file") from exc
    return PointMap(target, n_target, meta.get("source", ""), meta.get("target", ""))


def save_assignment(h: HardAssignment, path) -> None:
    np.savetxt(path, h.universe_class, fmt="%d", header=f"shape={h.shape_id} d={h.d}")


def load_assignment(path) -> HardAssignment:
    path = Path(path)
    meta = _parse_header(path)
    try:
        cls = np.loadtxt(path, dtype=np.int64, ndmin=1)
        d = int(meta["d"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: malformed assignment file") from exc
    return HardAssignment(cls, d, meta.get("shape", ""))
