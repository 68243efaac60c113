"""Train one model variant on part of a synthetic collection, evaluate on the rest."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError
from ..mesh import all_pairs_geodesics
from ..model import prepare_shape
from ..train import SUPERVISED, VARIANTS, TrainingConfig, infer_match_variant, train
from .metrics import geodesic_error, random_matching_error
from .synthetic import SyntheticCollection

DEFAULT_HELD_OUT = 4


@dataclass
class AblationResult:
    variant: str
    pair_errors: dict  # (source id, target id) -> mean geodesic error
    random_errors: dict
    history: list = field(default_factory=list)
    bandwidth: float | None = None

    @property
    def mean_error(self) -> float:
        return float(np.mean(list(self.pair_errors.values())))

    @property
    def random_error(self) -> float:
        return float(np.mean(list(self.random_errors.values())))

    def rows(self):
        for (a, b), e in sorted(self.pair_errors.items()):
            yield f"variant={self.variant} source={a} target={b} error={e:.6f}"
        yield f"variant={self.variant} mean={self.mean_error:.6f} random={self.random_error:.6f}"


def _split(n: int, held_out: int):
    if held_out == 0:
        return list(range(n)), list(range(n))
    if not 2 <= held_out <= n - 2:
        raise ConfigError(f"need >= 2 training and >= 2 held-out shapes, have {n} with held_out={held_out}")
    return list(range(n - held_out)), list(range(n - held_out, n))


def run_ablation(variant: str, collection: SyntheticCollection, config: TrainingConfig, k: int = 30,
                 held_out: int = DEFAULT_HELD_OUT, cache_dir=None, shapes=None,
                 pretrained=None) -> AblationResult:
    """Train ``variant`` on the first shapes, report errors on the last ``held_out``.

    Every ordered pair of held-out shapes is evaluated; ``held_out=0`` trains
    and evaluates on the whole collection. SUPERVISED uses the
    reference-vertex labels as universe classes. ``shapes`` may pass already
    prepared :class:`ShapeData` objects in collection order. ``pretrained``
    (a :class:`TrainState` of the same variant) skips training.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    config = replace(config, variant=variant)
    train_idx, test_idx = _split(len(collection), held_out)
    if shapes is None:
        shapes = [prepare_shape(m, k, cache_dir=cache_dir) for m in collection.meshes]
    train_shapes = [shapes[i] for i in train_idx]
    d, labels = None, None
    if variant == SUPERVISED:
        d = collection.reference.n
        labels = [collection.gt[i].labels for i in train_idx]
    if pretrained is not None:
        if pretrained.config.variant != variant:
            raise ConfigError(f"pretrained state is {pretrained.config.variant}, not {variant}")
        state = pretrained
    else:
        state = train(train_shapes, config, d=d, labels=labels)

    errors, rand = {}, {}
    for j in test_idx:
        dist = all_pairs_geodesics(collection.meshes[j])
        for i in test_idx:
            if i == j:
                continue
            gt = collection.pair_gt(i, j)
            pm = infer_match_variant(shapes[i], shapes[j], state.nets, config)
            key = (shapes[i].id, shapes[j].id)
            errors[key] = geodesic_error(pm, gt, collection.meshes[j], dist).mean
            rand[key] = random_matching_error(gt, collection.meshes[j], seed=config.seed, dist=dist)
    bw = [h["bandwidth"] for h in state.history if "bandwidth" in h]
    return AblationResult(variant, errors, rand, [h["total"] for h in state.history], bw[-1] if bw else None)
