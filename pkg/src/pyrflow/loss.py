"""Training objective: supervised endpoint error, unsupervised warp
alignment, and edge-aware smoothness, combined per stage and across stages.

Array-level functions return python floats with explicit ``*_backward``
companions; the ``*_node`` builders wire the same math into the reverse-mode
graph.  All losses reduce by summation unless ``reduction="mean"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flowops, graph
from .tensor import ShapeError, as_array4


@dataclass
class LossWeights:
    """Coefficients of the combined objective.

    ``stage_weights`` is indexed finest-first: entry 0 belongs to the finest
    emitted flow, later entries to progressively coarser stages.
    """

    unsup_weight: float = 0.05
    reg_weight: float = 0.005
    stage_weights: tuple = (0.32, 0.08, 0.02, 0.01, 0.005)

    def __post_init__(self):
        if self.unsup_weight < 0 or self.reg_weight < 0 or any(
                w < 0 for w in self.stage_weights):
            raise ValueError("loss weights must be non-negative")


def _reduce(total: float, count: int, reduction: str) -> float:
    if reduction == "sum":
        return float(total)
    if reduction == "mean":
        return float(total) / count
    raise ValueError(f"unknown reduction: {reduction!r}")


def _check_flow_pair(w, w_hat):
    w = flowops.as_flow_array(w, "predicted flow")
    w_hat = flowops.as_flow_array(w_hat, "target flow")
    if w.shape != w_hat.shape:
        raise ShapeError(
            f"flow shapes differ: predicted {w.shape} vs target {w_hat.shape}"
        )
    return w, w_hat


def supervised_loss(w, w_hat, reduction: str = "sum",
                    second_term: str = "l1") -> float:
    """Per-pixel Euclidean flow error plus a per-component distance term.

    The second term is the plain absolute difference by default;
    ``second_term="smooth_l1"`` switches it to the Huber form with unit
    transition point.
    """
    w, w_hat = _check_flow_pair(w, w_hat)
    d = w - w_hat
    epe = np.sqrt((d * d).sum(axis=1))
    if second_term == "l1":
        comp = np.abs(d).sum()
    elif second_term == "smooth_l1":
        a = np.abs(d)
        comp = np.where(a < 1.0, 0.5 * a * a, a - 0.5).sum()
    else:
        raise ValueError(f"unknown second_term: {second_term!r}")
    n, _, h, ww = w.shape
    return _reduce(epe.sum() + comp, n * h * ww, reduction)


def supervised_loss_backward(w, w_hat, reduction: str = "sum",
                             second_term: str = "l1") -> np.ndarray:
    """Gradient with respect to the predicted flow."""
    w, w_hat = _check_flow_pair(w, w_hat)
    d = w - w_hat
    epe = np.sqrt((d * d).sum(axis=1, keepdims=True))
    safe = np.where(epe > 0, epe, 1.0)
    g = np.where(epe > 0, d / safe, 0.0)
    if second_term == "l1":
        g = g + np.sign(d)
    else:
        g = g + np.clip(d, -1.0, 1.0)
    n, _, h, ww = w.shape
    if reduction == "mean":
        g = g / (n * h * ww)
    return g.astype(w.dtype)


def unsupervised_loss(f1, f2, w, reduction: str = "sum") -> float:
    """Photometric/feature alignment error |f1 - f2 warped by w|."""
    f1 = as_array4(f1, "unsupervised f1")
    f2 = as_array4(f2, "unsupervised f2")
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    resid = f1 - flowops.warp_bilinear(f2, w)
    return _reduce(np.abs(resid).sum(), resid.size, reduction)


def unsupervised_loss_backward(f1, f2, w, reduction: str = "sum"):
    """Gradients with respect to (f1, f2, w)."""
    f1 = as_array4(f1, "unsupervised f1")
    f2 = as_array4(f2, "unsupervised f2")
    resid = f1 - flowops.warp_bilinear(f2, w)
    s = np.sign(resid)
    if reduction == "mean":
        s = s / resid.size
    gf2, gw = flowops.warp_bilinear_backward(f2, w, -s)
    return s.astype(f1.dtype), gf2, gw


def _forward_diff_x(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[..., :-1] = a[..., 1:] - a[..., :-1]
    return out


def _forward_diff_y(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[..., :-1, :] = a[..., 1:, :] - a[..., :-1, :]
    return out


def regularization_loss(w, f1, reduction: str = "sum") -> float:
    """Edge-aware smoothness: flow gradients damped where f1 is flat.

    Each direction pairs the flow's forward difference with an
    ``exp(-|grad f1|)`` weight computed from the same direction's image
    gradient, with channel magnitudes combined by their 1-norm.
    """
    w = flowops.as_flow_array(w, "regularization flow")
    f1 = as_array4(f1, "regularization f1")
    if f1.shape[0] != w.shape[0] or f1.shape[2:] != w.shape[2:]:
        raise ShapeError(
            f"flow shape {w.shape} and feature shape {f1.shape} must share "
            f"batch and spatial extents"
        )
    ex = np.exp(-np.abs(_forward_diff_x(f1)).sum(axis=1))
    ey = np.exp(-np.abs(_forward_diff_y(f1)).sum(axis=1))
    total = (np.abs(_forward_diff_x(w)) * ex[:, None]).sum() \
        + (np.abs(_forward_diff_y(w)) * ey[:, None]).sum()
    n, _, h, ww = w.shape
    return _reduce(total, n * h * ww, reduction)


def regularization_loss_backward(w, f1, reduction: str = "sum"):
    """Gradients with respect to (w, f1)."""
    w = flowops.as_flow_array(w, "regularization flow")
    f1 = as_array4(f1, "regularization f1")
    dxw, dyw = _forward_diff_x(w), _forward_diff_y(w)
    dxf, dyf = _forward_diff_x(f1), _forward_diff_y(f1)
    ex = np.exp(-np.abs(dxf).sum(axis=1, keepdims=True))
    ey = np.exp(-np.abs(dyf).sum(axis=1, keepdims=True))

    gw = np.zeros_like(w)
    sx = np.sign(dxw) * ex
    sy = np.sign(dyw) * ey
    gw[..., 1:] += sx[..., :-1]
    gw[..., :-1] -= sx[..., :-1]
    gw[..., 1:, :] += sy[..., :-1, :]
    gw[..., :-1, :] -= sy[..., :-1, :]

    gf = np.zeros_like(f1)
    mx = (np.abs(dxw).sum(axis=1, keepdims=True) * ex) * np.sign(dxf)
    my = (np.abs(dyw).sum(axis=1, keepdims=True) * ey) * np.sign(dyf)
    gf[..., 1:] -= mx[..., :-1]
    gf[..., :-1] += mx[..., :-1]
    gf[..., 1:, :] -= my[..., :-1, :]
    gf[..., :-1, :] += my[..., :-1, :]

    if reduction == "mean":
        n, _, h, ww = w.shape
        gw = gw / (n * h * ww)
        gf = gf / (n * h * ww)
    return gw, gf


def stage_loss(f1, f2, w, w_hat, weights: LossWeights, reduction: str = "sum",
               second_term: str = "l1", warp_scale: float = 1.0) -> float:
    """Supervised + unsup_weight * unsupervised + reg_weight * regularization.

    ``warp_scale`` converts the predicted flow into the pixel units of this
    stage's feature grid before the alignment and smoothness terms; the
    supervised term always compares raw values against the target.
    """
    w_arr = flowops.as_flow_array(w, "stage flow")
    ws = w_arr if warp_scale == 1.0 else w_arr * warp_scale
    total = supervised_loss(w_arr, w_hat, reduction, second_term)
    if weights.unsup_weight:
        total += weights.unsup_weight * unsupervised_loss(f1, f2, ws, reduction)
    if weights.reg_weight:
        total += weights.reg_weight * regularization_loss(ws, f1, reduction)
    return total


def total_loss(stage_flows, stage_targets, stage_f1, stage_f2,
               weights: LossWeights, reduction: str = "sum",
               second_term: str = "l1", warp_scale: float = 1.0) -> float:
    """Stage-weighted sum of :func:`stage_loss`, stages given coarsest first.

    ``weights.stage_weights[0]`` is applied to the finest stage.
    """
    n_stages = len(stage_flows)
    if not (len(stage_targets) == len(stage_f1) == len(stage_f2) == n_stages):
        raise ShapeError("total_loss: all per-stage lists must have equal length")
    if n_stages > len(weights.stage_weights):
        raise ValueError(
            f"{n_stages} stages configured but only {len(weights.stage_weights)} "
            f"stage weights available"
        )
    total = 0.0
    for i in range(n_stages):
        sw = weights.stage_weights[n_stages - 1 - i]
        total += sw * stage_loss(stage_f1[i], stage_f2[i], stage_flows[i],
                                 stage_targets[i], weights, reduction,
                                 second_term, warp_scale)
    return total


# ---------------------------------------------------------------------------
# graph node builders


def supervised_loss_node(w: graph.Node, w_hat: np.ndarray, reduction: str = "sum",
                         second_term: str = "l1") -> graph.Node:
    value = supervised_loss(w.value, w_hat, reduction, second_term)

    def vjp(g, need=(True,)):
        return (g * supervised_loss_backward(w.value, w_hat, reduction, second_term),)

    return graph.Node(np.asarray(value), (w,), vjp)


def unsupervised_loss_node(f1: graph.Node, f2: graph.Node, w: graph.Node,
                           reduction: str = "sum") -> graph.Node:
    value = unsupervised_loss(f1.value, f2.value, w.value, reduction)

    def vjp(g, need=(True, True, True)):
        gf1, gf2, gw = unsupervised_loss_backward(f1.value, f2.value, w.value,
                                                  reduction)
        return g * gf1, g * gf2, g * gw

    return graph.Node(np.asarray(value), (f1, f2, w), vjp)


def regularization_loss_node(w: graph.Node, f1: graph.Node,
                             reduction: str = "sum") -> graph.Node:
    value = regularization_loss(w.value, f1.value, reduction)

    def vjp(g, need=(True, True)):
        gw, gf = regularization_loss_backward(w.value, f1.value, reduction)
        return g * gw, g * gf

    return graph.Node(np.asarray(value), (w, f1), vjp)


def stage_loss_node(f1: graph.Node, f2: graph.Node, w: graph.Node,
                    w_hat: np.ndarray, weights: LossWeights,
                    reduction: str = "sum", second_term: str = "l1",
                    warp_scale: float = 1.0) -> graph.Node:
    terms = [supervised_loss_node(w, w_hat, reduction, second_term)]
    coeffs = [1.0]
    ws = w if warp_scale == 1.0 else graph.scale(w, warp_scale)
    if weights.unsup_weight:
        terms.append(unsupervised_loss_node(f1, f2, ws, reduction))
        coeffs.append(weights.unsup_weight)
    if weights.reg_weight:
        terms.append(regularization_loss_node(ws, f1, reduction))
        coeffs.append(weights.reg_weight)
    return graph.weighted_sum(terms, coeffs)


def total_loss_node(stage_flows, stage_targets, stage_f1, stage_f2,
                    weights: LossWeights, reduction: str = "sum",
                    second_term: str = "l1", warp_scale: float = 1.0):
    """Graph version of :func:`total_loss`; returns (total node, term floats).

    The reported floats split the weighted total into its supervised,
    unsupervised and regularization parts for the loss curve.
    """
    n_stages = len(stage_flows)
    if n_stages > len(weights.stage_weights):
        raise ValueError(
            f"{n_stages} stages configured but only {len(weights.stage_weights)} "
            f"stage weights available"
        )
    nodes = []
    coeffs = []
    sup_total = unsup_total = reg_total = 0.0
    for i in range(n_stages):
        sw = weights.stage_weights[n_stages - 1 - i]
        sup = supervised_loss_node(stage_flows[i], stage_targets[i], reduction,
                                   second_term)
        nodes.append(sup)
        coeffs.append(sw)
        sup_total += sw * float(sup.value)
        if weights.unsup_weight or weights.reg_weight:
            ws = stage_flows[i] if warp_scale == 1.0 \
                else graph.scale(stage_flows[i], warp_scale)
        if weights.unsup_weight:
            un = unsupervised_loss_node(stage_f1[i], stage_f2[i], ws, reduction)
            nodes.append(un)
            coeffs.append(sw * weights.unsup_weight)
            unsup_total += sw * weights.unsup_weight * float(un.value)
        if weights.reg_weight:
            reg = regularization_loss_node(ws, stage_f1[i], reduction)
            nodes.append(reg)
            coeffs.append(sw * weights.reg_weight)
            reg_total += sw * weights.reg_weight * float(reg.value)
    return graph.weighted_sum(nodes, coeffs), (sup_total, unsup_total, reg_total)
