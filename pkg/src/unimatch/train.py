"""Forward/backward over shape pairs, the training loop, fine-tuning and inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .assignment import DEFAULT_ITERS, DEFAULT_TAU, compose_pairwise, harden, sinkhorn
from .cache import load_container, save_container
from .errors import ConfigError, DimensionError, NonFiniteGradientError, ParseError
from .fmap import (
    DEFAULT_GAMMA,
    LAMBDA_COMPLETE,
    LAMBDA_PARTIAL,
    PointMap,
    fmap_to_pointmap,
    nearest_rows,
    partial_rank,
    resolvent_mask,
    solve_fmap,
)
from .losses import (
    COMPLETE,
    MODES,
    PARTIAL,
    LossWeights,
    format_log_line,
    loss_bijectivity,
    loss_classifier,
    loss_classifier_partial,
    loss_laplacian,
    loss_orthogonality,
    loss_partial_structural,
    loss_total,
    smoothed_cross_entropy,
)
from .model import Networks, ShapeData, build_networks

log = logging.getLogger(__name__)

FULL = "FULL"
CLASSIFIER_FREE = "CLASSIFIER_FREE"
FEATURE_SIMILARITY = "FEATURE_SIMILARITY"
SUPERVISED = "SUPERVISED"
VARIANTS = (FULL, CLASSIFIER_FREE, FEATURE_SIMILARITY, SUPERVISED)

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    total_iters: int = 20000
    detach_iters: int = 4000
    batch_pairs: int = 1
    tau: float = DEFAULT_TAU
    sinkhorn_iters: int = DEFAULT_ITERS
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = COMPLETE
    variant: str = FULL
    lam: float | None = None  # None: 0 for COMPLETE, 100 for PARTIAL
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.detach_iters <= self.total_iters:
            raise ConfigError("detach_iters must lie in [0, total_iters]")
        if self.batch_pairs != 1:
            raise ConfigError("only batch_pairs=1 is supported")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "TrainingConfig":
        kw.setdefault("weights", LossWeights.for_mode(mode))
        return cls(mode=mode, **kw)

    @property
    def fm_lambda(self) -> float:
        if self.lam is not None:
            return self.lam
        return LAMBDA_PARTIAL if self.mode == PARTIAL else LAMBDA_COMPLETE

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass(eq=False)
class PairOutput:
    C_xy: object = None
    C_yx: object = None
    S_x: object = None
    S_y: object = None
    parts: dict = field(default_factory=dict)
    total: torch.Tensor | None = None
    rank: int | None = None
    bandwidth: float | None = None  # FEATURE_SIMILARITY softmax bandwidth


def _features(nets: Networks, shape: ShapeData, dtype):
    return nets.feature(shape.inputs(dtype))


def _project(shape: ShapeData, F):
    pinv = torch.as_tensor((shape.basis.evecs * shape.basis.mass[:, None]).T, dtype=F.dtype)
    return pinv @ F


def _feature_similarity_logits(F_x, F_y, bandwidth=None):
    dist = torch.cdist(F_x, F_y) ** 2
    if bandwidth is None:
        bandwidth = dist.mean().clamp_min(1e-12)
    return -dist / bandwidth, float(torch.as_tensor(bandwidth).detach())


def forward_pair(x: ShapeData, y: ShapeData, nets: Networks, config: TrainingConfig,
                 iteration: int | None = None, gt=None) -> PairOutput:
    """One forward pass over the pair ``(x, y)``.

    ``iteration`` drives the detach schedule (``None`` means detach is over).
    ``gt`` holds universe labels ``(labels_x, labels_y)`` for the SUPERVISED variant.
    """
    dtype = config.torch_dtype
    out = PairOutput()
    F_x = _features(nets, x, dtype)
    F_y = _features(nets, y, dtype)
    phi_x, phi_y = x.phi(dtype), y.phi(dtype)
    detach = iteration is not None and iteration < config.detach_iters

    if config.variant == SUPERVISED:
        if gt is None:
            raise ConfigError("SUPERVISED variant needs ground-truth universe labels")
        out.S_x = sinkhorn(nets.classifier(F_x), config.tau, config.sinkhorn_iters)
        out.S_y = sinkhorn(nets.classifier(F_y), config.tau, config.sinkhorn_iters)
        ce = smoothed_cross_entropy(out.S_x.log_P, gt[0], 0.0) + smoothed_cross_entropy(out.S_y.log_P, gt[1], 0.0)
        out.parts = {"cls": ce}
        out.total = ce
        return out

    A_x, A_y = _project(x, F_x), _project(y, F_y)
    lam = config.fm_lambda
    mask_xy = resolvent_mask(x.basis.evals, y.basis.evals, config.gamma)
    mask_yx = resolvent_mask(y.basis.evals, x.basis.evals, config.gamma)
    out.C_xy = solve_fmap(A_x, A_y, mask_xy, lam, source=x.id, target=y.id)
    out.C_yx = solve_fmap(A_y, A_x, mask_yx, lam, source=y.id, target=x.id)
    C_xy, C_yx = out.C_xy.C, out.C_yx.C

    parts = {}
    if config.mode == COMPLETE:
        parts["bij"] = loss_bijectivity(C_xy, C_yx)
        parts["orth"] = loss_orthogonality(C_xy, C_yx)
        parts["lap"] = loss_laplacian(C_xy, C_yx, x.basis.evals, y.basis.evals)
    else:
        out.rank = partial_rank(x.basis.evals, y.basis.evals)
        parts["bij"], parts["orth"] = loss_partial_structural(C_xy, C_yx, out.rank)
        parts["lap"] = loss_laplacian(C_xy, C_yx, x.basis.evals, y.basis.evals)

    c_xy_cls = C_xy.detach() if detach else C_xy
    c_yx_cls = C_yx.detach() if detach else C_yx
    if config.variant == FULL:
        out.S_x = sinkhorn(nets.classifier(F_x), config.tau, config.sinkhorn_iters)
        out.S_y = sinkhorn(nets.classifier(F_y), config.tau, config.sinkhorn_iters)
        if config.mode == COMPLETE:
            P_x, P_y = out.S_x.P, out.S_y.P
            parts["cls"] = 0.5 * (
                loss_classifier(phi_x, phi_y, c_yx_cls, (P_x, P_y))
                + loss_classifier(phi_y, phi_x, c_xy_cls, (P_y, P_x))
            )
        else:
            emb = (phi_y @ C_xy).detach().numpy()
            pseudo = nearest_rows(emb, x.basis.evecs)
            parts["cls"] = loss_classifier_partial(
                out.S_x.log_P, out.S_y.log_P, pseudo, config.weights.smoothing
            )
    elif config.variant == FEATURE_SIMILARITY:
        logits, out.bandwidth = _feature_similarity_logits(F_x, F_y)
        pi_xy = sinkhorn(logits, 1.0, config.sinkhorn_iters).P
        pi_yx = sinkhorn(logits.T, 1.0, config.sinkhorn_iters).P
        parts["cls"] = 0.5 * (
            loss_classifier(phi_x, phi_y, c_yx_cls, pi_xy) + loss_classifier(phi_y, phi_x, c_xy_cls, pi_yx)
        )
    out.parts = parts
    out.total = loss_total(parts, config.weights, config.mode)
    return out


def backward_pair(out: PairOutput, nets: Networks) -> dict:
    """Backpropagate ``out.total``; returns gradients keyed by parameter name."""
    for p in nets.parameters():
        p.grad = None
    if out.total.requires_grad:
        out.total.backward()
    grads = {}
    for name, p in _named_parameters(nets):
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
        grads[name] = g
    return grads


def _named_parameters(nets: Networks):
    for k, p in nets.feature.named_parameters():
        yield f"feature.{k}", p
    if nets.classifier is not None:
        for k, p in nets.classifier.named_parameters():
            yield f"classifier.{k}", p


# ---------------------------------------------------------------------------
# training


def collection_pairs(shapes, mode: str):
    """Unordered pairs for COMPLETE; (reference, partial) pairs for PARTIAL.

    In PARTIAL mode ``shapes[0]`` is the complete shape acting as universe.
    """
    if len(shapes) < 2:
        raise ConfigError("training needs at least two shapes")
    if mode == PARTIAL:
        return [(0, j) for j in range(1, len(shapes))]
    return [(i, j) for i in range(len(shapes)) for j in range(i + 1, len(shapes))]


def universe_size(shapes, mode: str, d: int | None = None) -> int:
    if d is not None:
        return d
    if mode == PARTIAL:
        return shapes[0].n
    return max(s.n for s in shapes)


@dataclass(eq=False)
class TrainState:
    nets: Networks
    optimizer: torch.optim.Adam
    config: TrainingConfig
    d: int | None
    iteration: int = 0
    rng: np.random.Generator = None
    queue: list = field(default_factory=list)
    history: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)


def _adam(nets: Networks, lr: float):
    return torch.optim.Adam(list(nets.parameters()), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def init_state(shapes, config: TrainingConfig, d: int | None = None, nets: Networks | None = None) -> TrainState:
    if config.variant in (CLASSIFIER_FREE, FEATURE_SIMILARITY):
        d = None
    else:
        d = universe_size(shapes, config.mode, d)
    if nets is None:
        nets = build_networks(d, config.seed, dtype=config.torch_dtype)
    return TrainState(nets, _adam(nets, config.learning_rate), config, d,
                      rng=np.random.default_rng(config.seed))


def _next_pair(state: TrainState, pairs):
    if not state.queue:
        state.queue = [int(i) for i in state.rng.permutation(len(pairs))]
    return pairs[state.queue.pop(0)]


def train_step(state: TrainState, shapes, pairs, labels=None) -> PairOutput:
    i, j = _next_pair(state, pairs)
    gt = (labels[i], labels[j]) if labels is not None else None
    state.nets.feature.train()
    out = forward_pair(shapes[i], shapes[j], state.nets, state.config, state.iteration, gt)
    backward_pair(out, state.nets)
    state.optimizer.step()
    record = {k: float(v.detach()) for k, v in out.parts.items()}
    record["total"] = float(out.total.detach())
    record["pair"] = (i, j)
    if out.bandwidth is not None:
        record["bandwidth"] = out.bandwidth
    state.history.append(record)
    state.iteration += 1
    if state.config.log_every and state.iteration % state.config.log_every == 0:
        line = format_log_line(state.iteration, out.parts, out.total)
        if out.bandwidth is not None:
            line += f" bandwidth={out.bandwidth:.8g}"
        state.log_lines.append(line)
        log.info(line)
    return out


def train(shapes, config: TrainingConfig, d: int | None = None, labels=None,
          state: TrainState | None = None, checkpoint_dir=None, iters: int | None = None) -> TrainState:
    """Adam over uniformly sampled pairs, one pair per step.

    ``labels`` (per-shape universe labels) are only used by the SUPERVISED
    variant. ``state`` resumes a previous run. On a non-finite gradient the
    last checkpoint on disk is kept and the error propagates.
    """
    pairs = collection_pairs(shapes, config.mode)
    state = state or init_state(shapes, config, d)
    stop = config.total_iters if iters is None else min(config.total_iters, state.iteration + iters)
    while state.iteration < stop:
        train_step(state, shapes, pairs, labels)
        if checkpoint_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"ckpt_{state.iteration:06d}.npz")
    if checkpoint_dir:
        save_checkpoint(state, Path(checkpoint_dir) / "final.npz")
    return state


def fine_tune(x: ShapeData, y: ShapeData, nets: Networks, config: TrainingConfig, passes: int = 5):
    """Adapt a copy of ``nets`` to one pair with ``passes`` optimizer steps.

    Returns ``(adapted_nets, losses)`` where ``losses`` has ``passes + 1``
    entries: the pair loss before each step and after the last one.
    """
    adapted = nets.clone()
    opt = _adam(adapted, config.learning_rate)
    losses = []
    for _ in range(passes):
        out = forward_pair(x, y, adapted, config, None)
        losses.append(float(out.total.detach()))
        backward_pair(out, adapted)
        opt.step()
    with torch.no_grad():
        losses.append(float(forward_pair(x, y, adapted, config, None).total))
    return adapted, losses


# ---------------------------------------------------------------------------
# inference


def predict_assignment(shape: ShapeData, nets: Networks, config: TrainingConfig, method: str = "greedy"):
    if nets.classifier is None:
        raise ConfigError("model has no universe classifier")
    with torch.no_grad():
        F = _features(nets, shape, config.torch_dtype)
        soft = sinkhorn(nets.classifier(F), config.tau, config.sinkhorn_iters)
    return harden(soft, method, shape_id=shape.id)


def infer_match(x: ShapeData, y: ShapeData, nets: Networks, config: TrainingConfig) -> PointMap:
    """Map X -> Y from universe assignments alone; no functional map is built."""
    return compose_pairwise(predict_assignment(x, nets, config), predict_assignment(y, nets, config))


def infer_collection(shapes, nets: Networks, config: TrainingConfig):
    """Assignments for every shape and all ordered pairwise maps."""
    hard = {s.id: predict_assignment(s, nets, config) for s in shapes}
    maps = {(a, b): compose_pairwise(hard[a], hard[b]) for a in hard for b in hard if a != b}
    return hard, maps


def infer_match_variant(x: ShapeData, y: ShapeData, nets: Networks, config: TrainingConfig) -> PointMap:
    """Variant-aware inference used by the ablation runner."""
    if config.variant in (FULL, SUPERVISED):
        return infer_match(x, y, nets, config)
    dtype = config.torch_dtype
    with torch.no_grad():
        F_x, F_y = _features(nets, x, dtype), _features(nets, y, dtype)
        if config.variant == FEATURE_SIMILARITY:
            logits, _ = _feature_similarity_logits(F_x, F_y)
            if y.n < x.n:
                return PointMap(np.argmax(logits.numpy(), axis=1), y.n, x.id, y.id)
            hx = harden(sinkhorn(logits, 1.0, config.sinkhorn_iters))
            return PointMap(hx.universe_class, y.n, x.id, y.id)
        mask = resolvent_mask(y.basis.evals, x.basis.evals, config.gamma)
        C_yx = solve_fmap(_project(y, F_y), _project(x, F_x), mask, config.fm_lambda)
    pm = fmap_to_pointmap(C_yx, y.basis, x.basis)
    return PointMap(pm.target, y.n, x.id, y.id)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_KIND = "checkpoint"


def save_checkpoint(state: TrainState, path) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.nets.named_tensors().items()}
    opt_state = state.optimizer.state_dict()
    names = [k for k, _ in _named_parameters(state.nets)]
    for idx, name in enumerate(names):
        st = opt_state["state"].get(idx)
        if st:
            arrays[f"adam_m/{name}"] = st["exp_avg"].numpy()
            arrays[f"adam_v/{name}"] = st["exp_avg_sq"].numpy()
            arrays[f"adam_step/{name}"] = np.asarray(float(st["step"]))
    arrays["history_total"] = np.asarray([h["total"] for h in state.history])
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "d": state.d,
        "rng": json.dumps(state.rng.bit_generator.state),
        "queue": state.queue,
        "feature_widths": list(state.nets.feature.widths),
        "log_lines": state.log_lines,
    }
    save_container(path, meta, arrays)


def load_checkpoint(path) -> TrainState:
    meta, arrays = load_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ParseError(f"{path}: not a checkpoint")
    config = TrainingConfig.from_dict(meta["config"])
    nets = build_networks(meta["d"], config.seed, widths=tuple(meta["feature_widths"]), dtype=config.torch_dtype)
    nets.load_named({k[6:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")})
    opt = _adam(nets, config.learning_rate)
    names = [k for k, _ in _named_parameters(nets)]
    params = [p for _, p in _named_parameters(nets)]
    for name, p in zip(names, params):
        if f"adam_m/{name}" in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"adam_step/{name}"])),
                "exp_avg": torch.as_tensor(arrays[f"adam_m/{name}"]).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"adam_v/{name}"]).clone(),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng"])
    history = [{"total": float(t)} for t in arrays.get("history_total", [])]
    return TrainState(nets, opt, config, meta["d"], meta["iteration"], rng, list(meta["queue"]),
                      history, list(meta.get("log_lines", [])))


def check_shapes_fit(shapes, d: int | None):
    if d is not None:
        for s in shapes:
            if s.n > d:
                raise DimensionError(f"shape {s.id} has {s.n} vertices, universe only {d}")
