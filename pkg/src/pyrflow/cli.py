"""Command-line entry point: synth / train / eval / gradcheck / viz /
ablate / bench.

Every run resolves its configuration (file plus ``--set`` overrides) before
touching the filesystem, writes the resolved config beside its outputs, and
names its run directory by timestamp plus config hash.  Exit codes: 0 on
success, 1 on validation failure, 2 on internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import benchmark, data as datamod, evaluate, gradcheck, loss, network, train
from .tensor import ShapeError


class ConfigError(ValueError):
    pass


def _from_dict(cls, d: dict, path: str = ""):
    """Build a dataclass from a dict, rejecting unknown keys."""
    if d is None:
        return None
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if key == "augment" and isinstance(value, dict):
            value = _from_dict(datamod.AugmentConfig, value, path + "augment.")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path or cls.__name__} config: {e}") from e


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


@dataclasses.dataclass
class DataConfig:
    train_dir: str | None = None
    eval_dir: str | None = None
    layout: str = "paired"
    synth_count: int = 64
    synth_eval_count: int = 16
    synth_size: tuple = (64, 64)
    motion: str = "affine"
    max_translation: float = 8.0
    max_rotation_deg: float = 10.0
    n_patches: int = 0
    strict: bool = False

    def motion_spec(self) -> datamod.MotionSpec:
        return datamod.MotionSpec(kind=self.motion,
                                  max_translation=self.max_translation,
                                  max_rotation_deg=self.max_rotation_deg,
                                  n_patches=self.n_patches)


@dataclasses.dataclass
class RunConfig:
    network: network.NetworkConfig
    train: train.TrainConfig
    loss: loss.LossWeights
    data: DataConfig
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"network", "train", "loss", "data", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        cfg = cls(network=_from_dict(network.NetworkConfig, d.get("network", {}),
                                     "network."),
                  train=_from_dict(train.TrainConfig, d.get("train", {}), "train."),
                  loss=_from_dict(loss.LossWeights, d.get("loss", {}), "loss."),
                  data=_from_dict(DataConfig, d.get("data", {}), "data."),
                  seed=int(d.get("seed", 0)))
        if cfg.network.stages > len(cfg.loss.stage_weights):
            raise ConfigError(
                f"{cfg.network.stages} stages need {cfg.network.stages} stage "
                f"weights, got {len(cfg.loss.stage_weights)}")
        return cfg

    def to_dict(self) -> dict:
        return {"network": _to_jsonable(self.network),
                "train": _to_jsonable(self.train),
                "loss": _to_jsonable(self.loss),
                "data": _to_jsonable(self.data),
                "seed": self.seed}

    def fingerprint(self) -> str:
        return evaluate.config_fingerprint(self.to_dict())


def load_config(path: str | None, overrides) -> RunConfig:
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-dict value")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)


def make_run_dir(root: str, cfg: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{stamp}-{cfg.fingerprint()[:8]}"
    run.mkdir(parents=True, exist_ok=True)
    (run / "resolved_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return run


def _load_train_samples(cfg: RunConfig):
    if cfg.data.train_dir:
        samples = list(datamod.ingest_dataset(
            cfg.data.train_dir, cfg.data.layout,
            pad_multiple=1 << cfg.network.stages, strict=cfg.data.strict))
        if not samples:
            raise ConfigError(f"no training samples under {cfg.data.train_dir}")
        return samples
    return datamod.synth_dataset(cfg.data.synth_count, tuple(cfg.data.synth_size),
                                 cfg.data.motion_spec(), cfg.seed)


def _load_eval_samples(cfg: RunConfig):
    if cfg.data.eval_dir:
        samples = list(datamod.ingest_dataset(
            cfg.data.eval_dir, cfg.data.layout,
            pad_multiple=1 << cfg.network.stages, strict=cfg.data.strict))
        if not samples:
            raise ConfigError(f"no eval samples under {cfg.data.eval_dir}")
        return samples
    # held-out synthetic set drawn from a disjoint seed stream
    return datamod.synth_dataset(cfg.data.synth_eval_count,
                                 tuple(cfg.data.synth_size),
                                 cfg.data.motion_spec(), cfg.seed + 10_000)


def cmd_synth(args) -> int:
    spec = datamod.MotionSpec(kind=args.motion,
                              max_translation=args.max_translation,
                              max_rotation_deg=args.max_rotation,
                              n_patches=args.patches)
    h, w = (int(v) for v in args.size.lower().split("x"))
    samples = datamod.synth_dataset(args.count, (h, w), spec, args.seed)
    datamod.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    samples = _load_train_samples(cfg)
    run_dir = make_run_dir(args.out, cfg)
    params, optim, rows = train.run_training(
        cfg.network, cfg.train, cfg.loss, samples, out_dir=run_dir,
        log_every=args.log_every)
    train.write_loss_csv(rows, run_dir / "loss.csv")
    ckpt = run_dir / "checkpoint.bin"
    train.save_checkpoint(params, optim, ckpt)
    print(f"run directory: {run_dir}")
    print(f"final checkpoint: {ckpt}")
    return 0


def _eval_report(cfg: RunConfig, predictor, samples, dump_dir=None):
    fingerprint = evaluate.config_fingerprint(
        {"data": _to_jsonable(cfg.data), "seed": cfg.seed})
    return evaluate.evaluate(predictor, samples, fingerprint, dump_dir)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    if not (args.oracle or args.zero or args.checkpoint):
        raise ConfigError("eval needs --checkpoint, --oracle, or --zero")
    samples = _load_eval_samples(cfg)
    if args.oracle:
        predictor = evaluate.oracle_predictor()
    elif args.zero:
        predictor = evaluate.zero_predictor()
    else:
        params, _ = train.load_checkpoint(args.checkpoint)
        predictor = evaluate.model_predictor(params, cfg.network)
    run_dir = make_run_dir(args.out, cfg)
    report = _eval_report(cfg, predictor, samples,
                          run_dir / "predictions" if args.dump else None)
    (run_dir / "report.json").write_text(report.to_json())
    (run_dir / "report.md").write_text(report.to_markdown())
    print(f"mean AEE: {report.mean_aee:.4f} over {report.n_samples} samples")
    print(f"report: {run_dir / 'report.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_registry(names=args.only or None, seed=args.seed)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r.line())
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return 1 if failed else 0


def cmd_viz(args) -> int:
    flow = datamod.read_flo(args.flo)
    rgb = datamod.flow_to_color(flow, args.max_mag)
    datamod.save_image(args.out, rgb)
    print(f"wrote {args.out}")
    return 0


def ablation_config(cfg: RunConfig, pcm: bool, cwn: bool, residual: bool) -> RunConfig:
    """Component toggles: pyramid mapping, CWN normalization, residual branch."""
    net = dataclasses.replace(cfg.network, use_pyramid_mapping=pcm,
                              use_channel_norm=cwn, use_residual=residual)
    return dataclasses.replace(cfg, network=net)


ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("+pyramid-corr", True, False, False),
    ("+cwn-norm", True, True, False),
    ("+residual (full)", True, True, True),
)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    run_dir = make_run_dir(args.out, cfg)
    train_samples = _load_train_samples(cfg)
    eval_samples = _load_eval_samples(cfg)
    reports = []
    labels = []
    for label, pcm, cwn, residual in ABLATION_ROWS:
        variant = ablation_config(cfg, pcm, cwn, residual)
        params, _, rows = train.run_training(variant.network, variant.train,
                                             variant.loss, train_samples,
                                             log_every=args.log_every)
        predictor = evaluate.model_predictor(params, variant.network)
        report = _eval_report(cfg, predictor, eval_samples)
        reports.append(report)
        labels.append(label)
        print(f"{label}: AEE {report.mean_aee:.4f}")
    table = evaluate.compare(reports, labels)
    (run_dir / "ablation.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_bench(args) -> int:
    result = benchmark.run_correlation_benchmark(reps=args.reps)
    print(benchmark.format_benchmark(result))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pyrflow",
                                 description="pyramid-correlation optical flow")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", default="64x64")
    p.add_argument("--motion", default="affine", choices=datamod.MOTION_KINDS)
    p.add_argument("--max-translation", type=float, default=8.0)
    p.add_argument("--max-rotation", type=float, default=10.0)
    p.add_argument("--patches", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the three-phase training procedure")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default="runs")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or oracle/zero model)")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--zero", action="store_true")
    p.add_argument("--dump", action="store_true",
                   help="write .flo + color predictions")
    p.add_argument("--out", default="runs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops")
    p.add_argument("--only", action="append", metavar="SUBSTRING")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("viz", help="render a .flo file to a color image")
    p.add_argument("flo")
    p.add_argument("out")
    p.add_argument("--max-mag", type=float, default=None)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("ablate", help="train and compare component toggles")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default="runs")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="correlation kernel benchmark")
    p.add_argument("--reps", type=int, default=30)
    p.set_defaults(fn=cmd_bench)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError, datamod.FormatError, train.CheckpointError,
            train.TrainingError, FileNotFoundError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - last-resort diagnostic record
        print(json.dumps({"error": type(e).__name__, "message": str(e),
                          "internal": True}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
