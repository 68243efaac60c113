"""Command-line entry point: ``unimatch {synth,preprocess,train,match,eval}``.

Every command reads one flat JSON configuration (``--config``), applies
``--set key=value`` overrides, writes the fully resolved configuration into
the run directory and keeps all of its outputs there.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .assignment import check_cycle_consistency, load_pointmap, save_assignment, save_pointmap
from .errors import CycleConsistencyError, ConfigError, DataError, UnimatchError
from .losses import COMPLETE, MODES, PARTIAL, LossWeights
from .mesh import load_mesh, save_mesh
from .model import prepare_collection
from .train import (
    SUPERVISED,
    TrainingConfig,
    check_shapes_fit,
    fine_tune,
    infer_match,
    load_checkpoint,
    predict_assignment,
    train,
)

log = logging.getLogger("unimatch")

DEFAULT_THRESHOLDS = [round(0.01 * i, 2) for i in range(26)]


@dataclass
class RunConfig:
    """Flat run configuration; ``None`` means "use the mode default"."""

    meshes: list = field(default_factory=list)  # paths or glob patterns; PARTIAL: first is complete
    gt_dir: str | None = None  # ground-truth files ``<stem>.gt.txt``; default next to each mesh
    index_base: int = 0
    run_dir: str = "run"
    cache_dir: str | None = None  # default <run_dir>/cache
    k: int = 30
    d: int | None = None
    mode: str = COMPLETE
    variant: str = "FULL"
    learning_rate: float = 1e-3
    total_iters: int = 20000
    detach_iters: int = 4000
    tau: float = 0.2
    sinkhorn_iters: int = 10
    w_bij: float = 1.0
    w_orth: float = 1.0
    w_lap: float | None = None
    lambda_cls: float | None = None
    smoothing: float = 0.1
    lam: float | None = None
    gamma: float = 0.5
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 500
    log_every: int = 50
    shot_radius_frac: float = 0.10
    fine_tune_passes: int = 5
    pck_thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.index_base not in (0, 1):
            raise ConfigError("index_base must be 0 or 1")
        if not isinstance(self.meshes, list):
            raise ConfigError("meshes must be a list of paths")
        if int(self.k) < 1:
            raise ConfigError("k must be positive")
        self.training()  # surfaces invalid hyperparameters early

    def weights(self) -> LossWeights:
        base = LossWeights.for_mode(self.mode)
        return LossWeights(
            w_bij=self.w_bij,
            w_orth=self.w_orth,
            w_lap=base.w_lap if self.w_lap is None else self.w_lap,
            lambda_cls=base.lambda_cls if self.lambda_cls is None else self.lambda_cls,
            smoothing=self.smoothing,
        )

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate, total_iters=self.total_iters, detach_iters=self.detach_iters,
            tau=self.tau, sinkhorn_iters=self.sinkhorn_iters, weights=self.weights(), mode=self.mode,
            variant=self.variant, lam=self.lam, gamma=self.gamma, seed=self.seed, dtype=self.dtype,
            checkpoint_every=self.checkpoint_every, log_every=self.log_every,
        )

    def resolved(self) -> dict:
        out = asdict(self)
        w = self.weights()
        out.update(w_lap=w.w_lap, lambda_cls=w.lambda_cls, lam=self.training().fm_lambda,
                   cache_dir=str(self.cache_path), meshes=[str(p) for p in self.mesh_paths(strict=False)])
        return out

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.run_path / "cache"

    def mesh_paths(self, strict: bool = True) -> list:
        paths = []
        for pattern in self.meshes:
            hits = sorted(glob.glob(pattern)) if glob.has_magic(pattern) else [pattern]
            paths.extend(Path(h) for h in hits)
        if strict and not paths:
            raise DataError("the collection is empty: no meshes configured")
        return paths

    def gt_path(self, mesh_path: Path) -> Path:
        base = Path(self.gt_dir) if self.gt_dir else mesh_path.parent
        return base / f"{mesh_path.stem}.gt.txt"


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = _parse_value(value)
    return RunConfig.from_dict(raw)


def _write_resolved(cfg: RunConfig, command: str) -> Path:
    cfg.run_path.mkdir(parents=True, exist_ok=True)
    path = cfg.run_path / f"config.{command}.json"
    path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    return path


def _load_shapes(cfg: RunConfig, stats=None, paths=None):
    paths = cfg.mesh_paths() if paths is None else paths
    if not paths:
        raise DataError("the collection is empty: no meshes configured")
    for p in paths:
        if not p.exists():
            raise DataError(f"mesh file {p} not found")
    # PARTIAL: the first mesh is the complete reference and fixes the SHOT radius
    shapes = prepare_collection([load_mesh(p) for p in paths], cfg.k, partial=cfg.mode == PARTIAL,
                                cache_dir=cfg.cache_path, radius_frac=cfg.shot_radius_frac, stats=stats)
    return shapes, paths


def _load_gt(cfg: RunConfig, mesh_path: Path):
    from .eval.synthetic import GroundTruth

    path = cfg.gt_path(mesh_path)
    if not path.exists():
        raise DataError(f"ground-truth file {path} not found")
    return GroundTruth.load(path, cfg.index_base)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .eval.synthetic import make_partial, make_synthetic_collection

    out = Path(args.out)
    col = make_synthetic_collection(args.base, args.count, args.seed, args.amplitude)
    if args.partial:
        meshes = [col.meshes[0]]
        gts = [col.gt[0]]
        for i in range(1, len(col)):
            part, _, gt = make_partial(col.meshes[i], args.partial, args.fraction, seed=args.seed + i, gt=col.gt[i])
            meshes.append(part)
            gts.append(gt)
    else:
        meshes, gts = col.meshes, col.gt
    out.mkdir(parents=True, exist_ok=True)
    for m, g in zip(meshes, gts):
        save_mesh(m, out / f"{m.name}.off")
        g.save(out / f"{m.name}.gt.txt")
    quick = {
        "meshes": [str(out / f"{m.name}.off") for m in meshes],
        "mode": PARTIAL if args.partial else COMPLETE,
        "run_dir": str(out / "run"),
        "total_iters": 2000,
        "detach_iters": 400,
    }
    (out / "config.json").write_text(json.dumps(quick, indent=2) + "\n")
    print(f"wrote {len(meshes)} shapes and {out / 'config.json'}")
    return 0


def cmd_preprocess(cfg: RunConfig, args) -> int:
    _write_resolved(cfg, "preprocess")
    stats = {}
    shapes, _ = _load_shapes(cfg, stats)
    print(f"shapes={len(shapes)} computed={stats.get('computed', 0)} cached={stats.get('cached', 0)}")
    return 0


def _training_labels(cfg: RunConfig, paths):
    return [_load_gt(cfg, p).labels for p in paths]


def cmd_train(cfg: RunConfig, args) -> int:
    _write_resolved(cfg, "train")
    shapes, paths = _load_shapes(cfg)
    tcfg = cfg.training()
    ckpt_dir = cfg.run_path / "checkpoints"
    labels = _training_labels(cfg, paths) if tcfg.variant == SUPERVISED else None
    d = cfg.d
    if tcfg.variant == SUPERVISED and d is None:
        d = int(max(lab.max() for lab in labels)) + 1
    state = None
    if args.resume:
        src = Path(args.checkpoint) if args.checkpoint else ckpt_dir / "final.npz"
        if not src.exists():
            raise DataError(f"no checkpoint to resume from at {src}")
        state = load_checkpoint(src)
        state.config = replace(state.config, total_iters=tcfg.total_iters)
        log.info("resuming at iteration %d", state.iteration)
    check_shapes_fit(shapes, d if state is None else state.d)
    state = train(shapes, tcfg if state is None else state.config, d=d, labels=labels, state=state,
                  checkpoint_dir=ckpt_dir, iters=args.iters)
    log_path = cfg.run_path / "train_log.txt"
    log_path.write_text("".join(line + "\n" for line in state.log_lines))
    print(f"iteration={state.iteration} checkpoint={ckpt_dir / 'final.npz'}")
    return 0


def _pair_name(a: str, b: str) -> str:
    return f"{a}__{b}.map.txt"


def cmd_match(cfg: RunConfig, args) -> int:
    _write_resolved(cfg, "match")
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.run_path / "checkpoints" / "final.npz"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    state = load_checkpoint(ckpt)
    if state.nets.classifier is None:
        raise ConfigError(f"checkpoint variant {state.config.variant} has no universe classifier")
    paths = [Path(p) for p in args.shapes] if args.shapes else None
    shapes, _ = _load_shapes(cfg, paths=paths)
    check_shapes_fit(shapes, state.d)
    out = cfg.run_path / "match"
    out.mkdir(parents=True, exist_ok=True)
    tcfg = state.config

    for s in shapes:
        save_assignment(predict_assignment(s, state.nets, tcfg), out / f"{s.id}.assign.txt")
    maps = {}
    for i, x in enumerate(shapes):
        for y in shapes[i + 1:]:
            nets = state.nets
            if args.fine_tune:
                nets, losses = fine_tune(x, y, state.nets, tcfg, cfg.fine_tune_passes)
                log.info("fine-tune %s/%s loss %.6g -> %.6g", x.id, y.id, losses[0], losses[-1])
            maps[(x.id, y.id)] = infer_match(x, y, nets, tcfg)
            maps[(y.id, x.id)] = infer_match(y, x, nets, tcfg)
            save_pointmap(maps[(x.id, y.id)], out / _pair_name(x.id, y.id), state.d)

    report = check_cycle_consistency(maps)
    (out / "cycle_report.txt").write_text(
        f"triplets={report.triplets} violations={len(report.violations)}\n"
        + "".join(line + "\n" for line in report.lines())
    )
    print(f"shapes={len(shapes)} pairs={len(maps) // 2} triplets={report.triplets} "
          f"violations={len(report.violations)}")
    if not report.ok:
        if args.fine_tune:
            log.warning("per-pair fine-tuning broke cycle consistency on %d vertices", len(report.violations))
        else:
            raise CycleConsistencyError(f"{len(report.violations)} cycle-consistency violations")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .eval.metrics import geodesic_error, pck
    from .eval.synthetic import pairwise_ground_truth

    _write_resolved(cfg, "eval")
    by_id = {p.stem: p for p in cfg.mesh_paths()}
    preds = [Path(p) for p in args.pred] if args.pred else sorted((cfg.run_path / "match").glob("*.map.txt"))
    if not preds:
        raise DataError("no prediction files to evaluate")
    lines, all_errors, unmatched = [], [], 0
    for p in preds:
        pm = load_pointmap(p)
        for sid in (pm.source_id, pm.target_id):
            if sid not in by_id:
                raise DataError(f"{p}: shape {sid!r} is not in the configured collection")
        mesh_y = load_mesh(by_id[pm.target_id])
        gt = pairwise_ground_truth(_load_gt(cfg, by_id[pm.source_id]), _load_gt(cfg, by_id[pm.target_id]))
        res = geodesic_error(pm, gt, mesh_y)
        all_errors.append(res.errors)
        unmatched += res.n_unmatched
        lines.append(f"source={pm.source_id} target={pm.target_id} mean={res.mean:.6f} "
                     f"evaluated={res.n_evaluated} unmatched={res.n_unmatched}")
    errors = np.concatenate(all_errors)
    mean = float(np.nanmean(errors)) if np.isfinite(errors).any() else float("nan")
    lines.append(f"mean={mean:.6f} pairs={len(preds)} unmatched={unmatched}")
    lines.extend(pck(errors, cfg.pck_thresholds).rows())
    text = "".join(line + "\n" for line in lines)
    (cfg.run_path / "eval.txt").write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unimatch", description="Cycle-consistent unsupervised multi-shape matching")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (value parsed as JSON when possible)")
        p.add_argument("--index-base", type=int, choices=[0, 1], help="index base of ground-truth files")
        return p

    p = sub.add_parser("synth", help="write a synthetic collection with ground truth and a quickstart config")
    p.add_argument("--out", required=True)
    p.add_argument("--base", default="bumpy-sphere", choices=["bumpy-sphere", "icosphere"])
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--partial", choices=["CUT", "HOLES"], help="keep shape 0 complete, make the rest partial")
    p.add_argument("--fraction", type=float, default=0.4)

    with_config(sub.add_parser("preprocess", help="build spectral and SHOT caches"))

    p = with_config(sub.add_parser("train", help="train (or resume) on the configured collection"))
    p.add_argument("--resume", action="store_true", help="continue from the run's final checkpoint")
    p.add_argument("--checkpoint", help="checkpoint to resume from")
    p.add_argument("--iters", type=int, help="stop after this many further iterations")

    p = with_config(sub.add_parser("match", help="universe assignments and all pairwise maps"))
    p.add_argument("--checkpoint", help="default: <run_dir>/checkpoints/final.npz")
    p.add_argument("--fine-tune", action="store_true", help="adapt the networks to each pair first")
    p.add_argument("shapes", nargs="*", help="mesh files (default: the configured collection)")

    p = with_config(sub.add_parser("eval", help="geodesic error and PCK of predicted maps"))
    p.add_argument("--pred", nargs="*", help="map files (default: <run_dir>/match/*.map.txt)")
    return parser


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "match": cmd_match, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        overrides = list(args.set)
        if args.index_base is not None:
            overrides.append(f"index_base={args.index_base}")
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except UnimatchError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
