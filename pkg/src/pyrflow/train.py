"""Optimization: Adam, staged learning-rate schedules, the three-phase
training procedure, ground-truth pyramid scaling, and checkpoints.

Training is deterministic for a fixed seed on one platform: batch indices,
augmentation draws and motionless injection are all stateless functions of
(seed, phase, step, slot), so a resumed run replays the identical stream.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import graph, loss, network
from .tensor import DTYPES, avg_pool2

CKPT_MAGIC = b"PYRFCKPT"
CKPT_VERSION = 1
PHASES = ("main", "residual_frozen", "joint")
SCHEDULES = ("s_long", "s_fine", "constant")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps_main: int = 2000
    steps_residual: int = 800
    steps_joint: int = 800
    batch_size: int = 4
    schedule_main: str = "s_long"
    schedule_residual: str = "s_long"
    schedule_joint: str = "s_fine"
    lr_scale: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    motionless_fraction: float = 3.0 / 22.0
    motionless_warmup_frac: float = 0.1
    reduction: str = "sum"
    second_term: str = "l1"
    unsup_level_source: str = "features"  # or "images"
    augment: datamod.AugmentConfig | None = None

    def __post_init__(self):
        for s in (self.schedule_main, self.schedule_residual, self.schedule_joint):
            if s not in SCHEDULES:
                raise ValueError(f"unknown schedule {s!r}")
        if self.unsup_level_source not in ("features", "images"):
            raise ValueError("unsup_level_source must be 'features' or 'images'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def steps_for(self, phase: str) -> int:
        return {"main": self.steps_main, "residual_frozen": self.steps_residual,
                "joint": self.steps_joint}[phase]

    def schedule_for(self, phase: str) -> str:
        return {"main": self.schedule_main,
                "residual_frozen": self.schedule_residual,
                "joint": self.schedule_joint}[phase]


# learning-rate breakpoints as fractions of the phase length, mirroring the
# staged halving recipes this family of networks trains with
_SCHEDULE_TABLE = {
    "s_long": (1e-4, (0.4 / 1.2, 0.6 / 1.2, 0.8 / 1.2, 1.0 / 1.2)),
    "s_fine": (1e-5, (0.4, 0.6, 0.8)),
    "constant": (1e-4, ()),
}


def lr_at(schedule: str, step: int, total_steps: int) -> float:
    """Piecewise-constant rate; halves at each proportional breakpoint."""
    if schedule not in _SCHEDULE_TABLE:
        raise ValueError(f"unknown schedule {schedule!r}")
    base, fracs = _SCHEDULE_TABLE[schedule]
    if total_steps <= 0:
        return base
    progress = step / total_steps
    drops = sum(1 for f in fracs if progress >= f)
    return base * 0.5 ** drops


@dataclass
class OptimState:
    """Adam moment accumulators, keyed like the parameter registry."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: network.NetworkParams) -> "OptimState":
        state = cls()
        for name, pair in params.items():
            state.m[name] = np.zeros_like(pair.value)
            state.v[name] = np.zeros_like(pair.value)
        return state


def adam_step(params: network.NetworkParams, state: OptimState, lr: float,
              updatable=None) -> None:
    """One bias-corrected Adam update over the updatable parameter names."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    names = params.names() if updatable is None else updatable
    for name in names:
        pair = params[name]
        g = pair.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        pair.value -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


def scale_targets(flow: np.ndarray, levels: int, flow_scale: float):
    """Supervision pyramid: flow/scale at level 0, then halved per level.

    Each downsampling halves both the resolution (2x2 mean) and the values,
    keeping displacements in the pixels of their own level.
    """
    out = [np.asarray(flow) / flow_scale]
    for _ in range(levels):
        out.append(avg_pool2(out[-1]) * 0.5)
    return out


def unscale_flow(flow: np.ndarray, flow_scale: float) -> np.ndarray:
    return np.asarray(flow) * flow_scale


def phase_updatable(params: network.NetworkParams, phase: str):
    if phase == "main":
        return [n for n in params.names() if not n.startswith("res.")]
    if phase == "residual_frozen":
        return [n for n in params.names() if n.startswith("res.")]
    if phase == "joint":
        return params.names()
    raise ValueError(f"unknown phase {phase!r}")


def _residual_is_identity(params: network.NetworkParams,
                          cfg: network.NetworkConfig) -> bool:
    if not cfg.use_residual:
        return True
    return all(not params[n].value.any() for n in params.names()
               if n.startswith("res.") and n.endswith(("out.kernel", "out.bias")))


def _batch(samples, ids):
    f1 = np.concatenate([samples[i].frame1.data for i in ids])
    f2 = np.concatenate([samples[i].frame2.data for i in ids])
    gt = np.concatenate([samples[i].flow_fwd.data for i in ids])
    return f1, f2, gt


def _draw_batch(samples, tcfg: TrainConfig, phase: str, step: int):
    """Stateless batch assembly: indices, reversal, augmentation, injection."""
    rng = datamod._rng_for(tcfg.seed, phase, step, "draw")
    ids = rng.integers(0, len(samples), tcfg.batch_size)
    frac = tcfg.motionless_fraction
    if phase == "main":
        warmup = max(1, round(tcfg.motionless_warmup_frac * tcfg.steps_main))
        if step < warmup:
            ramp = step / warmup
            frac = 1.0 - (1.0 - frac) * ramp
    chosen = []
    for slot, i in enumerate(ids):
        s = samples[int(i)]
        r = datamod._rng_for(tcfg.seed, phase, step, slot)
        if r.random() < frac:
            s = datamod.make_motionless(s)
        else:
            if tcfg.augment is not None and tcfg.augment.motion_reversal \
                    and s.flow_bwd is not None and r.random() < 0.5:
                s = datamod.motion_reversal(s)
            if tcfg.augment is not None and (tcfg.augment.geometric
                                             or tcfg.augment.photometric):
                per_draw = replace(tcfg.augment,
                                   seed=int(r.integers(0, 2 ** 31)))
                s = datamod.augment(s, per_draw)
        chosen.append(s)
    f1 = np.concatenate([s.frame1.data for s in chosen])
    f2 = np.concatenate([s.frame2.data for s in chosen])
    gt = np.concatenate([s.flow_fwd.data for s in chosen])
    return f1, f2, gt


def _stage_targets(gt: np.ndarray, cfg: network.NetworkConfig):
    pyramid = scale_targets(gt, cfg.levels, cfg.flow_scale)
    # coarsest stage first, full-resolution target last
    return [pyramid[k] for k in range(cfg.levels, 0, -1)] + [pyramid[0]]


def _loss_features(result: network.ForwardResult, cfg: network.NetworkConfig,
                   source: str):
    if source == "features":
        return result.features1, result.features2
    # image pyramid instead of learned features
    i1, i2 = result.features1[-1], result.features2[-1]
    pools1, pools2 = [i1], [i2]
    for _ in range(cfg.levels):
        pools1.append(graph.avg_pool2(pools1[-1]))
        pools2.append(graph.avg_pool2(pools2[-1]))
    f1 = [pools1[k] for k in range(cfg.levels, 0, -1)] + [i1]
    f2 = [pools2[k] for k in range(cfg.levels, 0, -1)] + [i2]
    return f1, f2


def train_step(params, optim, net_cfg, tcfg, weights, samples, phase,
               step, use_residual):
    f1, f2, gt = _draw_batch(samples, tcfg, phase, step)
    dtype = DTYPES[net_cfg.dtype]
    result = network.model_forward(params, f1.astype(dtype), f2.astype(dtype),
                                   net_cfg, use_residual=use_residual)
    targets = [t.astype(dtype) for t in _stage_targets(gt, net_cfg)]
    feats1, feats2 = _loss_features(result, net_cfg, tcfg.unsup_level_source)
    total_node, (l_sup, l_unsup, l_reg) = loss.total_loss_node(
        result.stage_flows, targets, feats1, feats2, weights,
        reduction=tcfg.reduction, second_term=tcfg.second_term,
        warp_scale=net_cfg.flow_scale)
    total_node = graph.scale(total_node, 1.0 / tcfg.batch_size)
    total = float(total_node.value)
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss at {phase} step {step}")
    params.zero_grads()
    graph.backward(total_node)
    lr = lr_at(tcfg.schedule_for(phase), step, tcfg.steps_for(phase)) \
        * tcfg.lr_scale
    adam_step(params, optim, lr, phase_updatable(params, phase))
    b = tcfg.batch_size
    return total, lr, (l_sup / b, l_unsup / b, l_reg / b)


def train_phase(params, optim, net_cfg, tcfg, weights, samples, phase,
                global_step: int = 0, out_dir=None, log_every: int = 0):
    """Run one phase; returns loss-curve rows (step, phase, lr, terms...).

    ``residual_frozen`` updates only the residual branch; the backbone and
    estimator parameters are bit-identical before and after.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    rows = []
    steps = tcfg.steps_for(phase)
    skip_residual = phase == "main" and _residual_is_identity(params, net_cfg)
    use_res = net_cfg.use_residual and not skip_residual
    last_ckpt = None
    for step in range(steps):
        try:
            total, lr, (ls, lu, lreg) = train_step(
                params, optim, net_cfg, tcfg, weights, samples, phase, step,
                use_res)
        except TrainingError as e:
            raise TrainingError(
                f"{e} (last checkpoint: {last_ckpt or 'none'})") from e
        rows.append((global_step + step, phase, lr, total, ls, lu, lreg))
        if log_every and (step + 1) % log_every == 0:
            print(f"[{phase}] step {step + 1}/{steps} loss {total:.4f} lr {lr:g}")
        if out_dir is not None and tcfg.checkpoint_every \
                and (step + 1) % tcfg.checkpoint_every == 0:
            last_ckpt = Path(out_dir) / f"ckpt_{phase}_{step + 1}.bin"
            save_checkpoint(params, optim, last_ckpt)
    return rows


def run_training(net_cfg: network.NetworkConfig, tcfg: TrainConfig,
                 weights: loss.LossWeights, samples, out_dir=None,
                 params=None, optim=None, log_every: int = 0):
    """Full three-phase procedure; returns (params, optim, loss rows)."""
    if params is None:
        params = network.init_params(net_cfg, seed=tcfg.seed)
    if optim is None:
        optim = OptimState.for_params(params)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    global_step = 0
    for phase in PHASES:
        if phase == "residual_frozen" and not net_cfg.use_residual:
            continue
        phase_rows = train_phase(params, optim, net_cfg, tcfg, weights, samples,
                                 phase, global_step, out_dir, log_every)
        rows.extend(phase_rows)
        global_step += len(phase_rows)
        if out_dir is not None:
            save_checkpoint(params, optim, Path(out_dir) / f"ckpt_{phase}.bin")
    return params, optim, rows


def write_loss_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,phase,lr,total,loss_sup,loss_unsup,loss_reg\n")
        for step, phase, lr, total, ls, lu, lreg in rows:
            fh.write(f"{step},{phase},{lr!r},{total!r},{ls!r},{lu!r},{lreg!r}\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: network.NetworkParams, optim: OptimState | None,
                    path) -> None:
    """Versioned binary container; save -> load -> save is byte-identical."""
    names = params.names()
    dtype = params[names[0]].value.dtype if names else np.float32
    manifest = {
        "version": CKPT_VERSION,
        "dtype": dtype.name if hasattr(dtype, "name") else str(dtype),
        "params": [{"name": n, "shape": list(params[n].value.shape)}
                   for n in names],
        "optim": None if optim is None else {
            "step": optim.step, "beta1": optim.beta1, "beta2": optim.beta2,
            "eps": optim.eps},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].value).tobytes())
        if optim is not None:
            for n in names:
                fh.write(np.ascontiguousarray(optim.m[n]).tobytes())
                fh.write(np.ascontiguousarray(optim.v[n]).tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Returns (NetworkParams, OptimState | None); validates every entry."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 12 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, blob_len = struct.unpack_from("<IQ", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, "
            f"expected {CKPT_VERSION}")
    off = len(CKPT_MAGIC) + 12
    try:
        manifest = json.loads(raw[off:off + blob_len].decode())
    except Exception as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    off += blob_len
    dtype = np.dtype(manifest["dtype"])
    params = network.NetworkParams()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        if off + nbytes > len(raw):
            raise CheckpointError(
                f"{path}: truncated payload at parameter {entry['name']!r}")
        arr = np.frombuffer(raw, dtype, count=int(np.prod(shape)),
                            offset=off).reshape(shape).copy()
        params.add(entry["name"], arr)
        off += nbytes
    optim = None
    if manifest["optim"] is not None:
        o = manifest["optim"]
        optim = OptimState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"],
                           eps=o["eps"])
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            nbytes = count * dtype.itemsize
            if off + 2 * nbytes > len(raw):
                raise CheckpointError(
                    f"{path}: truncated optimizer state at {entry['name']!r}")
            optim.m[entry["name"]] = np.frombuffer(
                raw, dtype, count=count, offset=off).reshape(shape).copy()
            off += nbytes
            optim.v[entry["name"]] = np.frombuffer(
                raw, dtype, count=count, offset=off).reshape(shape).copy()
            off += nbytes
    return params, optim
