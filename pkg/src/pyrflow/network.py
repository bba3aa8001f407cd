"""Multi-stage coarse-to-fine flow network.

Layout for an S-stage configuration:

* a shared-weight atrous backbone extracts features at levels ``1..S-1``
  (level k lives at 1/2^k resolution; level 0 is the raw image);
* per level, windowed correlation builds a cost volume, and the volumes are
  aggregated fine-to-coarse by downsample-and-concatenate pyramid mapping;
* stages run coarsest-first: a correlation-warping-normalization (CWN) block
  estimates the stage flow, and a residual branch, fed from the previous
  stage, adds a learned correction;
* the final stage upsamples the finest CWN flow to input resolution and adds
  the last residual correction.

Flows inside the network are in scaled units (true pixel displacement
divided by ``flow_scale``); ``flow_scale`` converts them back to pixels for
warping and for the externally returned field.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import graph
from .flowops import FlowField, reduced_channels
from .tensor import DTYPES, GradPair, ShapeError, as_array4

BACKBONE_DILATIONS = (1, 2, 4, 8)
UNIT_DILATIONS = (1, 2, 4)
UPSAMPLE_VARIANTS = ("early", "mid", "late")


@dataclass
class NetworkConfig:
    stages: int = 3
    in_channels: int = 3
    feature_channels: tuple = (16, 32, 64, 96)
    corr_radius: int = 4
    patch_radius: int = 0
    estimator_channels: tuple = (128, 96, 64, 32)
    residual_channels: tuple = (64, 64, 128, 256)
    upsample_variant: str = "early"
    flow_upsample_mode: str = "bicubic"
    flow_scale: float = 20.0
    use_pyramid_mapping: bool = True
    use_channel_norm: bool = True
    use_residual: bool = True
    activation_slope: float = 0.1
    dtype: str = "float32"
    parallel_correlation: bool = True

    def __post_init__(self):
        if not 2 <= self.stages <= 5:
            raise ValueError(f"stages must be in [2, 5], got {self.stages}")
        if self.levels > len(self.feature_channels):
            raise ValueError(
                f"{self.stages} stages need {self.levels} feature channel entries, "
                f"got {len(self.feature_channels)}"
            )
        if self.upsample_variant not in UPSAMPLE_VARIANTS:
            raise ValueError(f"unknown upsample variant: {self.upsample_variant!r}")
        if not self.residual_channels:
            raise ValueError("residual_channels must be non-empty")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.corr_radius < 0 or self.patch_radius < 0:
            raise ValueError("correlation radii must be >= 0")
        if self.flow_scale <= 0:
            raise ValueError("flow_scale must be positive")

    @property
    def levels(self) -> int:
        """Backbone pyramid depth; stage flows appear at levels (levels..0)."""
        return self.stages - 1

    def feat_ch(self, level: int) -> int:
        return self.in_channels if level == 0 else self.feature_channels[level - 1]

    @property
    def offsets(self) -> int:
        d = 2 * self.corr_radius + 1
        return d * d

    def mapped_channels(self, level: int) -> int:
        """Channels of the aggregated cost volume at a given level."""
        ch = self.offsets
        if not self.use_pyramid_mapping:
            return ch
        for _ in range(1, level):
            ch = self.offsets + reduced_channels(ch)
        return ch

    def estimator_in_channels(self, level: int) -> int:
        # mapped volume + warped-correlation volume + features + upsampled flow
        return self.mapped_channels(level) + self.offsets + self.feat_ch(level) + 2

    def branch_in_channels(self, out_level: int) -> int:
        """Residual branch input channels for the branch emitting at out_level."""
        in_level = out_level + 1
        ch = self.feat_ch(min(in_level, self.levels)) + 2
        if out_level < self.levels:
            ch += self.residual_channels[-1]
        return ch

    def stage_configs(self):
        return [
            StageConfig(level=k, feature_channels=self.feat_ch(k),
                        corr_radius=self.corr_radius,
                        residual_channels=tuple(self.residual_channels),
                        upsample_variant=self.upsample_variant)
            for k in range(self.levels, 0, -1)
        ]


@dataclass
class StageConfig:
    """Per-stage summary: pyramid level and the knobs that shape its blocks."""

    level: int
    feature_channels: int
    corr_radius: int = 4
    residual_channels: tuple = (64, 64, 128, 256)
    upsample_variant: str = "early"

    def __post_init__(self):
        if self.level < 1:
            raise ValueError(f"stage level must be >= 1, got {self.level}")
        if not self.residual_channels:
            raise ValueError("residual_channels must be non-empty")


@dataclass
class StageState:
    """Tensors produced while running one stage, for inspection and tests."""

    level: int
    features1: graph.Node
    features2: graph.Node
    cost_volume: graph.Node | None
    warped2: graph.Node | None
    flow: graph.Node
    residual: graph.Node | None


@dataclass
class ForwardResult:
    stage_flows: list          # graph nodes, coarsest -> finest (level 0 last)
    features1: list            # per stage: backbone features, raw image last
    features2: list
    states: list

    @property
    def final(self) -> graph.Node:
        return self.stage_flows[-1]


class NetworkParams:
    """Ordered name -> GradPair registry; insertion order is the manifest order."""

    def __init__(self):
        self.pairs: dict[str, GradPair] = {}

    def add(self, name: str, value: np.ndarray) -> GradPair:
        if name in self.pairs:
            raise ValueError(f"duplicate parameter name: {name}")
        pair = GradPair(value)
        self.pairs[name] = pair
        return pair

    def __getitem__(self, name: str) -> GradPair:
        return self.pairs[name]

    def __contains__(self, name):
        return name in self.pairs

    def names(self):
        return list(self.pairs)

    def items(self):
        return self.pairs.items()

    def zero_grads(self):
        for pair in self.pairs.values():
            pair.zero_grad()

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self.pairs.values())


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # independently seeded per parameter so shared sub-structures get
    # identical values across differently-sized configurations
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, zlib.crc32(name.encode())))))


def _he_kernel(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(cfg: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Build every parameter of the configured network.

    Kernels are He-normal, biases zero; the residual output convolutions are
    zero so that at initialization every correction vanishes and the network
    output equals the CWN-only output exactly.
    """
    dtype = DTYPES[cfg.dtype]
    params = NetworkParams()

    def conv(name, out_c, in_c, k, zero=False, transpose=False):
        shape = (in_c, out_c, k, k) if transpose else (out_c, in_c, k, k)
        if zero:
            kern = np.zeros(shape, dtype=dtype)
        else:
            kern = _he_kernel(_param_rng(seed, name), shape, in_c * k * k, dtype)
        params.add(f"{name}.kernel", kern)
        params.add(f"{name}.bias", np.zeros(out_c, dtype=dtype))

    for k in range(1, cfg.levels + 1):
        in_c = cfg.feat_ch(k - 1)
        out_c = cfg.feat_ch(k)
        bc = max(1, out_c // 4)
        for d in BACKBONE_DILATIONS:
            conv(f"backbone.L{k}.branch_d{d}", bc, in_c, 3)
        conv(f"backbone.L{k}.mix", out_c, len(BACKBONE_DILATIONS) * bc, 1)

    for k in range(cfg.levels, 0, -1):
        in_c = cfg.estimator_in_channels(k)
        for i, out_c in enumerate(tuple(cfg.estimator_channels) + (2,)):
            conv(f"est.L{k}.conv{i}", out_c, in_c, 3)
            in_c = out_c

    if cfg.use_residual:
        for i, out_c in enumerate(cfg.residual_channels):
            conv(f"res.shared.u{i}.mid1", out_c, out_c, 3)
            conv(f"res.shared.u{i}.mid2", out_c, out_c, 3)
        for j in range(cfg.levels, -1, -1):
            in_c = cfg.branch_in_channels(j)
            if cfg.upsample_variant == "early":
                # project down while upsampling so the units run lean at the
                # doubled resolution
                conv(f"res.L{j}.up", cfg.residual_channels[0], in_c, 4,
                     transpose=True)
                in_c = cfg.residual_channels[0]
            elif cfg.upsample_variant == "mid":
                mid_c = cfg.residual_channels[min(1, len(cfg.residual_channels) - 1)]
                conv(f"res.L{j}.up", mid_c, mid_c, 4, transpose=True)
            else:
                last_c = cfg.residual_channels[-1]
                conv(f"res.L{j}.up", last_c, last_c, 4, transpose=True)
            for i, out_c in enumerate(cfg.residual_channels):
                conv(f"res.L{j}.u{i}.proj", out_c, in_c, 1)
                for d in UNIT_DILATIONS:
                    conv(f"res.L{j}.u{i}.atrous_d{d}", out_c, in_c, 3)
                conv(f"res.L{j}.u{i}.last", out_c, out_c, 3)
                in_c = out_c
            conv(f"res.L{j}.out", 2, cfg.residual_channels[-1], 3, zero=True)
    return params


class _Binding:
    """Per-forward cache of Param nodes so reuse accumulates gradients."""

    def __init__(self, params: NetworkParams):
        self.params = params
        self.nodes: dict[str, graph.Param] = {}

    def __call__(self, name: str) -> graph.Param:
        node = self.nodes.get(name)
        if node is None:
            node = graph.Param(name, self.params[name])
            self.nodes[name] = node
        return node

    def conv(self, x, name, stride=1, dilation=1, padding=0):
        return graph.conv2d(x, self(f"{name}.kernel"), self(f"{name}.bias"),
                            stride, dilation, padding)

    def tconv(self, x, name):
        return graph.conv_transpose2d(x, self(f"{name}.kernel"),
                                      self(f"{name}.bias"), stride=2, padding=1)


def backbone_forward(image: graph.Node, bind: _Binding, cfg: NetworkConfig):
    """Shared-weight feature pyramid; returns nodes for levels 1..levels.

    Each level runs four parallel atrous convolutions (dilations 1, 2, 4, 8),
    concatenates them and mixes with a strided 1x1 convolution, halving the
    extents.
    """
    n, c, h, w = image.value.shape
    div = 1 << cfg.levels
    if h % div or w % div:
        raise ShapeError(
            f"backbone input extents {(h, w)} must be divisible by {div}; "
            f"pad the images (the data pipeline pads by replication)"
        )
    feats = []
    x = image
    for k in range(1, cfg.levels + 1):
        branches = [
            graph.leaky_relu(
                bind.conv(x, f"backbone.L{k}.branch_d{d}", dilation=d, padding=d),
                cfg.activation_slope)
            for d in BACKBONE_DILATIONS
        ]
        mixed = bind.conv(graph.concat(branches), f"backbone.L{k}.mix", stride=2)
        x = graph.leaky_relu(mixed, cfg.activation_slope)
        feats.append(x)
    return feats


def cwn_forward(level: int, f1: graph.Node, f2: graph.Node, volume: graph.Node,
                flow_prev: graph.Node | None, bind: _Binding, cfg: NetworkConfig):
    """Correlation-warping-normalization stage: estimates this level's flow.

    Warps the second feature map by the upsampled previous flow, correlates
    it against the first map, normalizes volumes and flow, and runs the conv
    estimator.  Returns (flow, warped features, warped-correlation volume).
    """
    if flow_prev is None:
        n, _, h, w = f1.value.shape
        up = graph.constant(np.zeros((n, 2, h, w), dtype=f1.value.dtype))
        f2w = f2
    else:
        up = graph.upsample_flow(flow_prev, cfg.flow_upsample_mode)
        f2w = graph.warp(f2, graph.scale(up, cfg.flow_scale))
    wvol = graph.correlate(f1, f2w, cfg.corr_radius, cfg.patch_radius,
                           cfg.parallel_correlation)

    def norm(node):
        return graph.channel_normalize(node) if cfg.use_channel_norm else node

    x = graph.concat([norm(volume), norm(wvol), f1, norm(up)])
    n_layers = len(cfg.estimator_channels) + 1
    for i in range(n_layers):
        x = bind.conv(x, f"est.L{level}.conv{i}", padding=1)
        if i < n_layers - 1:
            x = graph.leaky_relu(x, cfg.activation_slope)
    return x, f2w, wvol


def conv_stack_unit(x: graph.Node, level_tag: str, unit: int, bind: _Binding,
                    cfg: NetworkConfig) -> graph.Node:
    """Atrous projection block followed by a single residual block.

    Block 1 sums three parallel atrous convolutions, applies one further
    convolution without trailing activation and adds a 1x1 projection of the
    input.  Block 2 is conv-conv (second without activation) plus identity.
    The mid convolutions are shared across stages; the atrous, projection and
    final convolutions belong to the stage.
    """
    own = f"res.{level_tag}.u{unit}"
    shared = f"res.shared.u{unit}"
    slope = cfg.activation_slope
    atr = [bind.conv(x, f"{own}.atrous_d{d}", dilation=d, padding=d)
           for d in UNIT_DILATIONS]
    a = graph.leaky_relu(graph.add(graph.add(atr[0], atr[1]), atr[2]), slope)
    b = bind.conv(a, f"{shared}.mid1", padding=1)
    o1 = graph.leaky_relu(graph.add(b, bind.conv(x, f"{own}.proj")), slope)
    c = graph.leaky_relu(bind.conv(o1, f"{shared}.mid2", padding=1), slope)
    d_ = bind.conv(c, f"{own}.last", padding=1)
    return graph.leaky_relu(graph.add(d_, o1), slope)


def residual_branch_forward(residual_prev: graph.Node | None,
                            stage_inputs: tuple, out_level: int,
                            bind: _Binding, cfg: NetworkConfig):
    """Residual branch emitting features and a flow correction at out_level.

    Inputs live one level coarser; the single 2x transposed-convolution
    upsample sits before all conv units (early), between units 2 and 3 (mid)
    or after all units (late).  The final convolution is zero-initialized so
    corrections start at exactly zero.
    """
    f_in, w_in = stage_inputs
    parts = ([residual_prev] if residual_prev is not None else []) + [f_in, w_in]
    x = graph.concat(parts) if len(parts) > 1 else parts[0]
    tag = f"L{out_level}"
    n_units = len(cfg.residual_channels)
    if cfg.upsample_variant == "early":
        x = graph.leaky_relu(bind.tconv(x, f"res.{tag}.up"), cfg.activation_slope)
    for i in range(n_units):
        x = conv_stack_unit(x, tag, i, bind, cfg)
        if cfg.upsample_variant == "mid" and i == min(1, n_units - 1):
            x = graph.leaky_relu(bind.tconv(x, f"res.{tag}.up"),
                                 cfg.activation_slope)
    if cfg.upsample_variant == "late":
        x = graph.leaky_relu(bind.tconv(x, f"res.{tag}.up"), cfg.activation_slope)
    correction = bind.conv(x, f"res.{tag}.out", padding=1)
    return x, correction


def model_forward(params: NetworkParams, image1, image2, cfg: NetworkConfig,
                  use_residual: bool | None = None) -> ForwardResult:
    """Full forward pass; returns stage flows coarsest-to-finest.

    Stage flows are in scaled units; the last entry sits at input resolution.
    ``use_residual`` overrides the config toggle (used to skip branches whose
    corrections are provably zero, and for ablations).
    """
    use_res = cfg.use_residual if use_residual is None else use_residual
    if use_res and not cfg.use_residual:
        raise ValueError("use_residual requested but the config has no branch params")
    dtype = DTYPES[cfg.dtype]
    i1 = graph.constant(as_array4(image1, "image1").astype(dtype, copy=False))
    i2 = graph.constant(as_array4(image2, "image2").astype(dtype, copy=False))
    if i1.value.shape != i2.value.shape:
        raise ShapeError(
            f"frame shapes differ: {i1.value.shape} vs {i2.value.shape}"
        )
    bind = _Binding(params)
    feats1 = backbone_forward(i1, bind, cfg)
    feats2 = backbone_forward(i2, bind, cfg)

    volumes = []
    prev = None
    for k in range(1, cfg.levels + 1):
        single = graph.correlate(feats1[k - 1], feats2[k - 1], cfg.corr_radius,
                                 cfg.patch_radius, cfg.parallel_correlation)
        if cfg.use_pyramid_mapping and prev is not None:
            vol = graph.concat([single, graph.downsample_cost(prev)])
        else:
            vol = single
        volumes.append(vol)
        prev = vol

    stage_flows = []
    states = []
    flow_prev = None
    res_prev = None
    for k in range(cfg.levels, 0, -1):
        try:
            f1k, f2k = feats1[k - 1], feats2[k - 1]
            w_cwn, f2w, _ = cwn_forward(k, f1k, f2k, volumes[k - 1], flow_prev,
                                        bind, cfg)
            residual = None
            if use_res:
                if k == cfg.levels:
                    f_in = graph.avg_pool2(f1k)
                    n, _, hc, wc = f_in.value.shape
                    w_in = graph.constant(np.zeros((n, 2, hc, wc), dtype=dtype))
                else:
                    f_in, w_in = feats1[k], flow_prev
                residual, corr = residual_branch_forward(
                    res_prev, (f_in, w_in), k, bind, cfg)
                w_k = graph.add(w_cwn, corr)
                res_prev = residual
            else:
                w_k = w_cwn
        except ShapeError as e:
            raise ShapeError(f"stage at level {k}: {e}") from e
        stage_flows.append(w_k)
        states.append(StageState(k, f1k, f2k, volumes[k - 1],
                                 f2w if flow_prev is not None else None,
                                 w_k, residual))
        flow_prev = w_k

    try:
        w0 = graph.upsample_flow(flow_prev, cfg.flow_upsample_mode)
        residual0 = None
        if use_res:
            residual0, corr0 = residual_branch_forward(
                res_prev, (feats1[0], flow_prev), 0, bind, cfg)
            w0 = graph.add(w0, corr0)
    except ShapeError as e:
        raise ShapeError(f"stage at level 0: {e}") from e
    stage_flows.append(w0)
    states.append(StageState(0, i1, i2, None, None, w0, residual0))

    return ForwardResult(stage_flows=stage_flows,
                         features1=[feats1[k - 1] for k in range(cfg.levels, 0, -1)] + [i1],
                         features2=[feats2[k - 1] for k in range(cfg.levels, 0, -1)] + [i2],
                         states=states)


def fpcrnet_forward(params: NetworkParams, image1, image2, cfg: NetworkConfig):
    """Inference entry point: (stage FlowFields coarse->fine, full-res flow).

    The last stage flow already sits at input resolution; multiplying by
    ``flow_scale`` converts it to pixel displacements for external use.
    """
    result = model_forward(params, image1, image2, cfg)
    stage_fields = [FlowField(node.value) for node in result.stage_flows]
    final = FlowField(result.stage_flows[-1].value * cfg.flow_scale)
    return stage_fields, final
