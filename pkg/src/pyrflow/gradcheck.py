"""Central finite-difference verification of every analytic backward pass.

The harness compares vector-Jacobian products against central differences of
a random projection of the op's output.  Composite blocks (conv units, a
miniature two-stage network) are checked per parameter group on a sampled
subset of coordinates; primitive ops are checked exhaustively.

All checks run in float64; tolerances come from the per-op contracts
(1e-9 for linear ops, 1e-4 near interpolation/absolute-value kinks, 1e-5
otherwise).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import flowops, graph, loss, network, tensor
from .tensor import ConvParams, GradPair


@dataclass
class CheckReport:
    name: str
    tolerance: float
    max_rel_err: float
    per_input: tuple
    passed: bool
    failure: str | None = None
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = self.failure or f"max_rel_err={self.max_rel_err:.3e}"
        return f"{status:4s} {self.name:38s} tol={self.tolerance:.0e} {detail}"


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-12)
    floor = max(1e-3 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(forward, backward, inputs, step: float = 1e-5,
                      tolerance: float = 1e-5, name: str = "op", seed: int = 0,
                      max_coords: int | None = None) -> CheckReport:
    """Compare ``backward``'s vector-Jacobian products with central differences.

    ``forward(*inputs)`` may return an array or scalar; ``backward(*inputs, g)``
    must return one gradient per input (``None`` marks an input as not
    differentiated).  ``max_coords`` caps the checked coordinates per input;
    the default checks every coordinate.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    try:
        out0 = np.asarray(forward(*inputs), dtype=np.float64)
    except Exception as e:  # oracle failure must be reported, not raised
        return CheckReport(name, tolerance, np.inf, (), False,
                           failure=f"forward raised {type(e).__name__}: {e}")
    if not np.isfinite(out0).all():
        return CheckReport(name, tolerance, np.inf, (), False,
                           failure="non-finite forward value")
    g = rng.standard_normal(out0.shape) if out0.shape else np.float64(
        rng.standard_normal())
    analytic = backward(*inputs, g)
    per_input = []
    worst = 0.0
    for i, grad in enumerate(analytic):
        if grad is None:
            per_input.append(None)
            continue
        grad = np.asarray(grad, dtype=np.float64)
        x = inputs[i]
        flat = x.reshape(-1)
        size = flat.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = range(size)
        a_sel = []
        n_sel = []
        for j in coords:
            orig = flat[j]
            flat[j] = orig + step
            fp = np.asarray(forward(*inputs), dtype=np.float64)
            flat[j] = orig - step
            fm = np.asarray(forward(*inputs), dtype=np.float64)
            flat[j] = orig
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                return CheckReport(name, tolerance, np.inf, (), False,
                                   failure=f"non-finite value perturbing input {i}",
                                   seconds=time.perf_counter() - t0)
            n_sel.append(float(np.sum((fp - fm) * g)) / (2.0 * step))
            a_sel.append(grad.reshape(-1)[j])
        errs = _rel_errors(np.asarray(a_sel), np.asarray(n_sel))
        err = float(errs.max(initial=0.0))
        per_input.append(err)
        worst = max(worst, err)
    return CheckReport(name, tolerance, worst, tuple(per_input),
                       passed=worst < tolerance,
                       seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# registered cases


def _conv_fns(stride, dilation, padding):
    def forward(x, k, b):
        return tensor.conv2d(x, ConvParams(k, b, stride, dilation, padding))

    def backward(x, k, b, g):
        return tensor.conv2d_backward(x, ConvParams(k, b, stride, dilation,
                                                    padding), g)

    return forward, backward


def _tconv_fns(stride, padding):
    def forward(x, k, b):
        return tensor.conv_transpose2d(x, ConvParams(k, b, stride, 1, padding))

    def backward(x, k, b, g):
        return tensor.conv_transpose2d_backward(
            x, ConvParams(k, b, stride, 1, padding), g)

    return forward, backward


def _graph_fns(pairs: dict[str, GradPair], builder):
    """forward/backward over the values of ``pairs`` via the reverse-mode graph."""
    names = list(pairs)

    def _load(arrays):
        for nm, arr in zip(names, arrays):
            pairs[nm].value[...] = arr

    def forward(*arrays):
        _load(arrays)
        return builder().value

    def backward(*args):
        *arrays, g = args
        _load(arrays)
        for p in pairs.values():
            p.zero_grad()
        graph.backward(builder(), seed=np.asarray(g))
        return [pairs[nm].grad.copy() for nm in names]

    return forward, backward, [pairs[nm].value for nm in names]


def _case_conv_unit(rng):
    cfg = network.NetworkConfig(stages=2, in_channels=1, feature_channels=(3,),
                                corr_radius=1, estimator_channels=(3,),
                                residual_channels=(3,), dtype="float64")
    pairs: dict[str, GradPair] = {}

    def add_conv(name, oc, ic, k):
        pairs[f"{name}.kernel"] = GradPair(rng.standard_normal((oc, ic, k, k)) * 0.5)
        pairs[f"{name}.bias"] = GradPair(rng.standard_normal(oc) * 0.1)

    for d in network.UNIT_DILATIONS:
        add_conv(f"res.T.u0.atrous_d{d}", 3, 2, 3)
    add_conv("res.T.u0.proj", 3, 2, 1)
    add_conv("res.shared.u0.mid1", 3, 3, 3)
    add_conv("res.shared.u0.mid2", 3, 3, 3)
    add_conv("res.T.u0.last", 3, 3, 3)
    pairs["x"] = GradPair(rng.standard_normal((1, 2, 6, 6)))

    params = network.NetworkParams()
    params.pairs = pairs

    def builder():
        bind = network._Binding(params)
        return network.conv_stack_unit(bind("x"), "T", 0, bind, cfg)

    return _graph_fns(pairs, builder)


def _case_mini_network(rng):
    cfg = network.NetworkConfig(stages=2, in_channels=1, feature_channels=(3,),
                                corr_radius=1, estimator_channels=(3,),
                                residual_channels=(2, 3), dtype="float64",
                                parallel_correlation=False)
    params = network.init_params(cfg, seed=7)
    i1 = rng.standard_normal((1, 1, 8, 8))
    i2 = rng.standard_normal((1, 1, 8, 8))
    target = rng.standard_normal((1, 2, 8, 8)) * 0.3
    weights = loss.LossWeights(stage_weights=(0.32, 0.08))

    def builder():
        result = network.model_forward(params, i1, i2, cfg)
        # supervised at full res plus alignment on the raw frames keeps every
        # differentiable path (conv, correlate, warp, normalize, upsample) live
        total, _ = loss.total_loss_node(
            [result.stage_flows[-1]], [target], [result.features1[-1]],
            [result.features2[-1]], weights, warp_scale=2.0)
        return total

    return _graph_fns(dict(params.pairs), builder)


def registry(seed: int = 0):
    """All registered differentiable ops as (name, case builder, step, tol, coords)."""
    rng = np.random.default_rng(seed)

    def flow_frac(shape):
        # fractional displacements well away from the bilinear kinks
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return sign * (rng.integers(0, 2, shape) + rng.uniform(0.2, 0.45, shape))

    cases = []

    fwd, bwd = _conv_fns(1, 1, 1)
    cases.append(("conv2d 3x3 pad1", fwd, bwd,
                  [rng.standard_normal((1, 2, 5, 5)),
                   rng.standard_normal((3, 2, 3, 3)),
                   rng.standard_normal(3)], 1e-5, 1e-6, None))
    fwd, bwd = _conv_fns(2, 2, 2)
    cases.append(("conv2d 3x3 stride2 dil2", fwd, bwd,
                  [rng.standard_normal((1, 3, 7, 7)),
                   rng.standard_normal((2, 3, 3, 3)),
                   rng.standard_normal(2)], 1e-5, 1e-6, None))
    fwd, bwd = _tconv_fns(2, 1)
    cases.append(("conv_transpose2d 4x4 stride2", fwd, bwd,
                  [rng.standard_normal((1, 3, 4, 4)),
                   rng.standard_normal((3, 2, 4, 4)),
                   rng.standard_normal(2)], 1e-5, 1e-6, None))

    for label, shape in (("even", (1, 2, 4, 4)), ("odd", (1, 1, 5, 3))):
        cases.append((f"avg_pool2 {label}", tensor.avg_pool2,
                      lambda x, g: (tensor.avg_pool2_backward(x, g),),
                      [rng.standard_normal(shape)], 1e-2, 1e-9, None))

    x = rng.standard_normal((1, 2, 4, 4))
    x = x + np.sign(x) * 0.1  # keep away from the kink at zero
    cases.append(("leaky_relu", lambda a: tensor.leaky_relu(a, 0.1),
                  lambda a, g: (tensor.leaky_relu_backward(a, g, 0.1),),
                  [x], 1e-5, 1e-6, None))

    parts = [rng.standard_normal((1, c, 3, 4)) for c in (1, 3, 2)]
    cases.append(("concat_channels", lambda *xs: tensor.concat_channels(xs),
                  lambda *args: tensor.concat_channels_backward(args[:-1], args[-1]),
                  parts, 1e-2, 1e-9, None))

    for r, n in ((0, 2), (1, 1)):
        cases.append((
            f"correlate_single r={r} n={n}",
            lambda a, b, n=n, r=r: flowops.correlate(a, b, n, r),
            lambda a, b, g, n=n, r=r: flowops.correlate_backward(a, b, n, g, r),
            [rng.standard_normal((1, 4, 6, 6)), rng.standard_normal((1, 4, 6, 6))],
            1e-5, 1e-5, None))

    cases.append(("downsample_cost", flowops.downsample_cost_values,
                  lambda v, g: (flowops.downsample_cost_values_backward(v, g),),
                  [rng.standard_normal((1, 5, 6, 6))], 1e-2, 1e-9, None))

    cases.append(("warp_bilinear", flowops.warp_bilinear,
                  flowops.warp_bilinear_backward,
                  [rng.standard_normal((1, 3, 6, 6)), flow_frac((1, 2, 6, 6))],
                  1e-5, 1e-4, None))

    for mode in ("bicubic", "bilinear"):
        cases.append((f"upsample_flow {mode}",
                      lambda f, mode=mode: flowops.upsample_flow(f, mode),
                      lambda f, g, mode=mode: (
                          flowops.upsample_flow_backward(f, g, mode),),
                      [rng.standard_normal((1, 2, 4, 6))], 1e-2, 1e-9, None))

    cases.append(("channel_normalize", flowops.channel_normalize,
                  lambda v, g: (flowops.channel_normalize_backward(v, g),),
                  [rng.standard_normal((1, 3, 5, 5))], 1e-5, 1e-5, None))

    w_hat = rng.standard_normal((1, 2, 4, 4))
    d = np.sign(rng.standard_normal((1, 2, 4, 4))) * rng.uniform(0.2, 0.8,
                                                                 (1, 2, 4, 4))
    for variant in ("l1", "smooth_l1"):
        cases.append((
            f"supervised_loss {variant}",
            lambda w, v=variant: loss.supervised_loss(w, w_hat, "sum", v),
            lambda w, g, v=variant: (
                g * loss.supervised_loss_backward(w, w_hat, "sum", v),),
            [w_hat + d], 1e-5, 1e-5, None))

    f1 = rng.standard_normal((1, 2, 5, 5))
    f2 = rng.standard_normal((1, 2, 5, 5)) + 2.0  # residuals stay off zero
    cases.append(("unsupervised_loss",
                  loss.unsupervised_loss,
                  lambda a, b, w, g: tuple(
                      g * gr for gr in loss.unsupervised_loss_backward(a, b, w)),
                  [f1, f2, flow_frac((1, 2, 5, 5))], 1e-5, 1e-4, None))

    cases.append(("regularization_loss",
                  loss.regularization_loss,
                  lambda w, f, g: tuple(
                      g * gr for gr in loss.regularization_loss_backward(w, f)),
                  [rng.standard_normal((1, 2, 5, 5)),
                   rng.standard_normal((1, 3, 5, 5))], 1e-5, 1e-5, None))

    fwd, bwd, arrays = _case_conv_unit(np.random.default_rng(seed + 1))
    cases.append(("conv_stack_unit", fwd, bwd, arrays, 1e-5, 1e-5, 12))

    fwd, bwd, arrays = _case_mini_network(np.random.default_rng(seed + 2))
    cases.append(("two_stage_network", fwd, bwd, arrays, 1e-5, 1e-4, 6))

    return cases


def run_registry(names=None, seed: int = 0) -> list[CheckReport]:
    reports = []
    for i, (name, fwd, bwd, arrays, step, tol, coords) in enumerate(registry(seed)):
        if names and not any(s in name for s in names):
            continue
        reports.append(finite_diff_check(fwd, bwd, arrays, step=step,
                                         tolerance=tol, name=name,
                                         seed=seed + 31 * i, max_coords=coords))
    return reports
