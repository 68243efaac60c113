"""Unsupervised training losses.

All functions take torch tensors and return scalar tensors, so they can sit
anywhere inside an autograd graph.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, DimensionError

COMPLETE = "COMPLETE"
PARTIAL = "PARTIAL"
MODES = (COMPLETE, PARTIAL)


@dataclass(frozen=True)
class LossWeights:
    w_bij: float = 1.0
    w_orth: float = 1.0
    w_lap: float = 1e-3
    lambda_cls: float = 0.01
    smoothing: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and v == v and v != float("inf")):
                raise ConfigError(f"loss weight {k}={v} must be finite and >= 0")
        if self.smoothing >= 1:
            raise ConfigError("smoothing must lie in [0, 1)")

    @classmethod
    def for_mode(cls, mode: str) -> "LossWeights":
        if mode == COMPLETE:
            return cls()
        if mode == PARTIAL:
            return cls(w_lap=0.0, lambda_cls=1.0)
        raise ConfigError(f"unknown mode {mode!r}")


def _fro2(X):
    return (X ** 2).sum()


def _eye_like(C, k=None):
    k = C.shape[0] if k is None else k
    return torch.eye(k, dtype=C.dtype, device=C.device)


def _check_square_pair(C_xy, C_yx):
    if C_xy.ndim != 2 or C_xy.shape[0] != C_xy.shape[1] or C_xy.shape != C_yx.shape:
        raise DimensionError(f"expected two square maps of equal size, got {tuple(C_xy.shape)}, {tuple(C_yx.shape)}")


def loss_bijectivity(C_xy, C_yx):
    _check_square_pair(C_xy, C_yx)
    eye = _eye_like(C_xy)
    return _fro2(C_xy @ C_yx - eye) + _fro2(C_yx @ C_xy - eye)


def loss_orthogonality(C_xy, C_yx):
    _check_square_pair(C_xy, C_yx)
    eye = _eye_like(C_xy)
    return _fro2(C_xy.T @ C_xy - eye) + _fro2(C_yx.T @ C_yx - eye)


def loss_laplacian(C_xy, C_yx, evals_x, evals_y):
    """Commutativity with the eigenvalue matrices, both directions."""
    lx = torch.as_tensor(evals_x, dtype=C_xy.dtype)
    ly = torch.as_tensor(evals_y, dtype=C_xy.dtype)
    if C_xy.shape != (len(ly), len(lx)) or C_yx.shape != (len(lx), len(ly)):
        raise DimensionError("functional map sizes do not match the spectra")
    return _fro2(C_xy * lx[None, :] - ly[:, None] * C_xy) + _fro2(C_yx * ly[None, :] - lx[:, None] * C_yx)


def partial_identity(k: int, r: int, like) -> torch.Tensor:
    d = torch.zeros(k, dtype=like.dtype, device=like.device)
    d[:r] = 1.0
    return torch.diag(d)


def loss_partial_structural(C_xy, C_yx, r: int):
    """Slanted-diagonal versions of bijectivity and orthogonality.

    X is the complete shape, Y the partial one; ``C_xy`` is [k_y, k_x].
    Returns ``(L_bij, L_orth)``.
    """
    k_y, k_x = C_xy.shape
    if C_yx.shape != (k_x, k_y):
        raise DimensionError("C_yx must be the transpose shape of C_xy")
    if not 0 <= r <= k_y:
        raise DimensionError(f"rank r={r} outside [0, {k_y}]")
    I_r = partial_identity(k_y, r, C_xy)
    return _fro2(C_xy @ C_yx - I_r), _fro2(C_xy @ C_xy.T - I_r)


def loss_classifier(phi_x, phi_y, C_yx, pi_xy):
    """``||Phi_x C_yx - Pi_xy Phi_y||_F^2``.

    ``pi_xy`` is either the [n_x, n_y] soft map or a pair ``(P_x, P_y)`` of
    soft universe assignments, in which case ``Pi_xy = P_x P_y^T`` is applied
    without materializing it.
    """
    phi_x = torch.as_tensor(phi_x, dtype=C_yx.dtype)
    phi_y = torch.as_tensor(phi_y, dtype=C_yx.dtype)
    if C_yx.shape != (phi_x.shape[1], phi_y.shape[1]):
        raise DimensionError(f"C_yx shape {tuple(C_yx.shape)} vs bases {phi_x.shape[1]}, {phi_y.shape[1]}")
    if isinstance(pi_xy, (tuple, list)):
        P_x, P_y = pi_xy
        if P_x.shape[1] != P_y.shape[1] or P_x.shape[0] != phi_x.shape[0] or P_y.shape[0] != phi_y.shape[0]:
            raise DimensionError("soft assignments do not match the bases")
        transported = P_x @ (P_y.T @ phi_y)
    else:
        if pi_xy.shape != (phi_x.shape[0], phi_y.shape[0]):
            raise DimensionError(f"pi_xy shape {tuple(pi_xy.shape)} does not match bases")
        transported = pi_xy @ phi_y
    return _fro2(phi_x @ C_yx - transported)


def smoothed_cross_entropy(log_P, target, smoothing: float = 0.1):
    """Mean over rows of the label-smoothed cross entropy.

    Target distribution per row: ``(1 - smoothing)`` on the labelled class plus
    ``smoothing / d`` spread over all ``d`` classes. Rows with label -1 are skipped.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    keep = target >= 0
    if not bool(keep.any()):
        return log_P.new_zeros(())
    lp = log_P[keep]
    nll = -lp.gather(1, target[keep][:, None]).squeeze(1)
    uniform = -lp.mean(dim=1)
    return ((1.0 - smoothing) * nll + smoothing * uniform).mean()


def loss_classifier_partial(log_P_x, log_P_y, pseudo, smoothing: float = 0.1):
    """Complete shape X is the universe: its vertex i is pushed to class i;
    the partial shape follows the pseudo labels from the functional map."""
    n_x, d = log_P_x.shape
    if n_x != d:
        raise DimensionError(f"complete shape must have d={d} vertices, has {n_x}")
    if len(pseudo) != log_P_y.shape[0]:
        raise DimensionError("pseudo labels must cover every vertex of Y")
    ident = torch.arange(n_x)
    return smoothed_cross_entropy(log_P_x, ident, smoothing) + smoothed_cross_entropy(log_P_y, pseudo, smoothing)


def loss_total(parts: dict, weights: LossWeights | None = None, mode: str = COMPLETE):
    """``w_bij L_bij + w_orth L_orth + w_lap L_lap + lambda_cls L_cls``.

    Missing parts count as zero.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    w = LossWeights.for_mode(mode) if weights is None else weights
    total = 0.0
    for key, wt in (("bij", w.w_bij), ("orth", w.w_orth), ("lap", w.w_lap), ("cls", w.lambda_cls)):
        if key in parts and wt != 0.0:
            total = total + wt * parts[key]
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total), dtype=torch.float64)
    return total


def format_log_line(iteration: int, parts: dict, total) -> str:
    """``iter=12 bij=... orth=... lap=... cls=... total=...``."""
    items = [f"iter={iteration}"]
    for key in ("bij", "orth", "lap", "cls"):
        if key in parts:
            items.append(f"{key}={float(torch.as_tensor(parts[key]).detach()):.8g}")
    items.append(f"total={float(torch.as_tensor(total).detach()):.8g}")
    return " ".join(items)


def parse_log_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k == "iter" else float(v)
    return out
