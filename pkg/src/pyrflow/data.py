"""Sample sourcing: synthetic pair generation, augmentation, file formats.

Synthetic pairs are rendered from a padded noise canvas so that every pixel
of both frames is observed and the flow label is exact by construction.
Flow labels follow the usual convention: ``flow_fwd(x)`` is where the pixel
at x in frame 1 lands in frame 2.  ``flow_bwd`` stores the same motion
referenced at frame 2's grid (the displacement that brought content to x),
so reversing a pair negates it.

File formats: 2-float ``.flo`` flow files (float tag 202021.25, little
endian), binary PPM (P6) / PGM (P5) images, and a minimal PNG writer for
visualizations.
"""
from __future__ import annotations

import json
import math
import re
import struct
import sys
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .flowops import FlowField, warp_bilinear
from .tensor import ShapeError, Tensor4

FLO_TAG = np.float32(202021.25)
MOTION_KINDS = ("zero", "translation", "rotation", "affine")


class FormatError(ValueError):
    """Raised for malformed flow/image files; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Sample:
    """One training example: an image pair with dense forward flow."""

    frame1: Tensor4
    frame2: Tensor4
    flow_fwd: FlowField
    flow_bwd: FlowField | None
    id: str
    orig_hw: tuple | None = None

    def __post_init__(self):
        if self.frame1.shape != self.frame2.shape:
            raise ShapeError(
                f"frames must share shape: {self.frame1.shape} vs {self.frame2.shape}"
            )
        if self.flow_fwd.shape[2:] != self.frame1.shape[2:]:
            raise ShapeError(
                f"flow extents {self.flow_fwd.shape[2:]} must equal frame extents "
                f"{self.frame1.shape[2:]}"
            )


@dataclass
class MotionSpec:
    """Planar motion model: a global affine plus optional moving patches."""

    kind: str = "affine"
    max_translation: float = 8.0
    max_rotation_deg: float = 10.0
    scale_range: tuple = (1.0, 1.0)
    n_patches: int = 0
    patch_size: tuple = (8, 16)
    patch_max_translation: float = 1.5

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"motion kind must be one of {MOTION_KINDS}")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.n_patches and (self.patch_size[0] <= 0
                               or self.patch_size[0] > self.patch_size[1]):
            raise ValueError(f"degenerate patch size spec {self.patch_size}")


@dataclass
class AugmentConfig:
    """Augmentation switches and ranges; deterministic given (seed, sample id)."""

    geometric: bool = True
    max_translation: float = 2.0
    max_rotation_deg: float = 3.0
    scale_range: tuple = (0.97, 1.03)
    photometric: bool = True
    brightness: float = 0.08
    contrast: float = 0.08
    gamma: float = 0.08
    color: float = 0.04
    noise_sigma: float = 0.01
    motionless_fraction: float = 3.0 / 22.0
    motion_reversal: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if not 0.0 <= self.motionless_fraction <= 1.0:
            raise ValueError("motionless_fraction must be in [0, 1]")


def _rng_for(*entropy) -> np.random.Generator:
    parts = [zlib.crc32(e.encode()) if isinstance(e, str) else int(e)
             for e in entropy]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))


def _smooth_noise(rng, channels: int, h: int, w: int) -> np.ndarray:
    """Band-limited texture in [0.1, 0.9] so bilinear resampling stays faithful."""
    img = rng.random((channels, h, w))
    for _ in range(3):  # separable box blur, radius 2
        for axis in (1, 2):
            acc = img.copy()
            for shift in (1, 2, -1, -2):
                acc += np.roll(img, shift, axis=axis)
            img = acc / 5.0
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    return 0.1 + 0.8 * (img - lo) / np.maximum(hi - lo, 1e-9)


@dataclass
class _Affine:
    """x' = m @ (x - c) + c + t, acting on (x, y) pixel coordinates."""

    m: np.ndarray
    t: np.ndarray
    c: np.ndarray

    @classmethod
    def identity(cls, h, w):
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        return cls(np.eye(2), np.zeros(2), c)

    @classmethod
    def sample(cls, rng, spec: MotionSpec, h: int, w: int) -> "_Affine":
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        t = np.zeros(2)
        theta = 0.0
        s = 1.0
        if spec.kind in ("translation", "affine"):
            t = rng.uniform(-spec.max_translation, spec.max_translation, 2)
        if spec.kind in ("rotation", "affine"):
            theta = math.radians(
                rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        if spec.kind == "affine":
            s = rng.uniform(*spec.scale_range)
        m = s * np.array([[math.cos(theta), -math.sin(theta)],
                          [math.sin(theta), math.cos(theta)]])
        return cls(m, t, c)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        return (xy - self.c) @ self.m.T + self.c + self.t

    def inverse(self) -> "_Affine":
        mi = np.linalg.inv(self.m)
        return _Affine(mi, -mi @ self.t, self.c)

    def max_displacement(self, h: int, w: int) -> float:
        corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]],
                           dtype=float)
        return float(np.abs(self.apply(corners) - corners).max())


def _grid(h: int, w: int) -> np.ndarray:
    gy, gx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    return np.stack([gx, gy], axis=-1)  # (h, w, 2) as (x, y)


def _sample_canvas(canvas: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear gather from (c, H, W) at float (x, y) positions, edge-clamped."""
    c, hh, ww = canvas.shape
    x = np.clip(xy[..., 0], 0.0, ww - 1.0)
    y = np.clip(xy[..., 1], 0.0, hh - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, ww - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, hh - 2)
    fx = x - x0
    fy = y - y0
    v00 = canvas[:, y0, x0]
    v01 = canvas[:, y0, x0 + 1]
    v10 = canvas[:, y0 + 1, x0]
    v11 = canvas[:, y0 + 1, x0 + 1]
    return (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
            + v10 * fy * (1 - fx) + v11 * fy * fx)


def synth_pair(spec: MotionSpec, size: tuple, seed: int,
               sample_id: str | None = None, dtype=np.float32) -> Sample:
    """Render one labeled pair from a padded textured canvas.

    The canvas margin covers the sampled motion, so both frames observe real
    texture everywhere and the label is exact.  Patches (if any) ride on top
    of the background with their own small affine motion.
    """
    h, w = size
    rng = _rng_for(seed, sample_id or "synth")
    if spec.kind == "zero":
        motion = _Affine.identity(h, w)
    else:
        motion = _Affine.sample(rng, spec, h, w)
    margin = int(math.ceil(motion.max_displacement(h, w))) + 2
    canvas = _smooth_noise(rng, 3, h + 2 * margin, w + 2 * margin)

    grid = _grid(h, w)
    inv = motion.inverse()
    frame1 = canvas[:, margin:margin + h, margin:margin + w].copy()
    if spec.kind == "zero":
        frame2 = frame1.copy()
        fwd = np.zeros((h, w, 2))
        bwd = np.zeros((h, w, 2))
    else:
        frame2 = _sample_canvas(canvas, inv.apply(grid) + margin)
        fwd = motion.apply(grid) - grid
        bwd = grid - inv.apply(grid)

    for p in range(spec.n_patches):
        side = rng.integers(spec.patch_size[0], spec.patch_size[1] + 1, 2)
        ph, pw = int(side[0]), int(side[1])
        if ph <= 0 or pw <= 0:
            raise ValueError(f"degenerate patch {ph}x{pw}")
        py = int(rng.integers(margin, h - ph - margin)) if h - ph - margin > margin else 0
        px = int(rng.integers(margin, w - pw - margin)) if w - pw - margin > margin else 0
        texture = _smooth_noise(rng, 3, ph + 2 * margin, pw + 2 * margin)
        pm = _Affine(np.eye(2),
                     rng.uniform(-spec.patch_max_translation,
                                 spec.patch_max_translation, 2),
                     np.array([px + (pw - 1) / 2.0, py + (ph - 1) / 2.0]))
        frame1[:, py:py + ph, px:px + pw] = texture[:, margin:margin + ph,
                                                    margin:margin + pw]
        pinv = pm.inverse()
        src = pinv.apply(grid)
        inside2 = ((src[..., 0] >= px - 0.5) & (src[..., 0] < px + pw - 0.5)
                   & (src[..., 1] >= py - 0.5) & (src[..., 1] < py + ph - 0.5))
        tex_xy = src - np.array([px, py]) + margin
        patch2 = _sample_canvas(texture, tex_xy)
        frame2 = np.where(inside2[None], patch2, frame2)
        inside1 = np.zeros((h, w), bool)
        inside1[py:py + ph, px:px + pw] = True
        fwd[inside1] = (pm.apply(grid) - grid)[inside1]
        bwd[inside2] = (grid - pinv.apply(grid))[inside2]

    def pack(a):
        return np.ascontiguousarray(a.transpose(2, 0, 1)[None]).astype(dtype)

    return Sample(
        frame1=Tensor4(frame1[None].astype(dtype)),
        frame2=Tensor4(frame2[None].astype(dtype)),
        flow_fwd=FlowField(pack(fwd)),
        flow_bwd=FlowField(pack(bwd)),
        id=sample_id or f"synth-{seed}",
    )


def warp_residual(sample: Sample) -> float:
    """Mean |frame1 - frame2 warped by flow_fwd| over in-bounds targets."""
    f1 = sample.frame1.data
    flow = sample.flow_fwd.data
    warped = warp_bilinear(sample.frame2.data, flow)
    _, _, h, w = f1.shape
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    tx = gx[None] + flow[:, 0]
    ty = gy[None] + flow[:, 1]
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    if not valid.any():
        return 0.0
    resid = np.abs(f1 - warped).mean(axis=1)
    return float(resid[valid].mean())


def motion_reversal(s: Sample) -> Sample:
    """Swap the frames and re-reference the labels to the new order."""
    if s.flow_bwd is None:
        raise ValueError(f"sample {s.id!r} carries no backward flow to reverse")
    return Sample(frame1=s.frame2.copy(), frame2=s.frame1.copy(),
                  flow_fwd=FlowField(-s.flow_bwd.data),
                  flow_bwd=FlowField(-s.flow_fwd.data),
                  id=s.id + ":rev")


def make_motionless(s: Sample) -> Sample:
    zero = FlowField(np.zeros_like(s.flow_fwd.data))
    return Sample(frame1=s.frame1.copy(), frame2=s.frame1.copy(),
                  flow_fwd=zero, flow_bwd=FlowField(zero.data.copy()),
                  id=s.id + ":still")


def motionless_inject(samples, fraction: float, seed: int):
    """Replace a random fraction of the stream with zero-motion duplicates."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    for i, s in enumerate(samples):
        if fraction > 0 and _rng_for(seed, i, "still").random() < fraction:
            yield make_motionless(s)
        else:
            yield s


def augment(s: Sample, cfg: AugmentConfig) -> Sample:
    """Geometric + photometric augmentation with consistent label transform.

    An affine map B applied to the canvas moves the flow to
    ``W'(x) = M_B W(B^-1 x)``; photometric changes touch the frames only.
    """
    rng = _rng_for(cfg.seed, s.id, "aug")
    f1 = s.frame1.data[0].astype(np.float64)
    f2 = s.frame2.data[0].astype(np.float64)
    fwd = s.flow_fwd.data[0]
    bwd = s.flow_bwd.data[0] if s.flow_bwd is not None else None
    c, h, w = f1.shape

    if cfg.geometric:
        spec = MotionSpec(kind="affine", max_translation=cfg.max_translation,
                          max_rotation_deg=cfg.max_rotation_deg,
                          scale_range=cfg.scale_range)
        b = _Affine.sample(rng, spec, h, w)
        src = b.inverse().apply(_grid(h, w))
        f1 = _sample_canvas(f1, src)
        f2 = _sample_canvas(f2, src)

        def move_flow(fl):
            vecs = _sample_canvas(fl, src)  # (2, h, w), sampled at B^-1 x
            return np.einsum("ij,jhw->ihw", b.m, vecs)

        fwd = move_flow(fwd)
        bwd = move_flow(bwd) if bwd is not None else None

    if cfg.photometric:
        gain = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        bright = rng.uniform(-cfg.brightness, cfg.brightness)
        gam = 1.0 + rng.uniform(-cfg.gamma, cfg.gamma)
        color = 1.0 + rng.uniform(-cfg.color, cfg.color, (c, 1, 1))

        def photo(img, noise_key):
            img = np.clip(img, 0.0, 1.0) ** gam
            img = (img - 0.5) * gain + 0.5 + bright
            img = img * color
            if cfg.noise_sigma > 0:
                img = img + _rng_for(cfg.seed, s.id, noise_key).normal(
                    0.0, cfg.noise_sigma, img.shape)
            return np.clip(img, 0.0, 1.0)

        f1 = photo(f1, "noise1")
        f2 = photo(f2, "noise2")

    dtype = s.frame1.dtype
    return Sample(frame1=Tensor4(f1[None].astype(dtype)),
                  frame2=Tensor4(f2[None].astype(dtype)),
                  flow_fwd=FlowField(fwd[None].astype(s.flow_fwd.dtype)),
                  flow_bwd=None if bwd is None
                  else FlowField(bwd[None].astype(s.flow_fwd.dtype)),
                  id=s.id + ":aug")


# ---------------------------------------------------------------------------
# flow and image files


def write_flo(path, flow) -> None:
    flow = flow.data if isinstance(flow, Tensor4) else np.asarray(flow)
    if flow.ndim == 4:
        if flow.shape[0] != 1:
            raise ShapeError(f"write_flo expects a single field, got {flow.shape}")
        flow = flow[0]
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"write_flo expects (2, h, w), got {flow.shape}")
    _, h, w = flow.shape
    inter = flow.transpose(1, 2, 0).astype("<f4")  # (h, w, 2) u then v
    with open(path, "wb") as fh:
        fh.write(FLO_TAG.tobytes())
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(inter).tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    tag = np.frombuffer(raw, "<f4", count=1)[0]
    if tag != FLO_TAG:
        raise FormatError(f"{path}: bad magic {tag!r}, expected {float(FLO_TAG)}",
                          offset=0)
    w, h = struct.unpack_from("<ii", raw, 4)
    if not (0 < w < 100000 and 0 < h < 100000):
        raise FormatError(f"{path}: implausible extents {w}x{h}", offset=4)
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FormatError(
            f"{path}: payload truncated, need {need} bytes, have {len(raw)}",
            offset=len(raw))
    data = np.frombuffer(raw, "<f4", count=2 * w * h, offset=12)
    field = data.reshape(h, w, 2).transpose(2, 0, 1)[None]
    return FlowField(np.ascontiguousarray(field))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Binary P6 (3 channels) or P5 (1 channel) from a [0,1] float image."""
    img = image.data if isinstance(image, Tensor4) else np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    c = img.shape[0]
    if c == 3:
        payload = _to_uint8(img).transpose(1, 2, 0)
        header = b"P6\n%d %d\n255\n" % (img.shape[2], img.shape[1])
    elif c == 1:
        payload = _to_uint8(img[0])
        header = b"P5\n%d %d\n255\n" % (img.shape[2], img.shape[1])
    else:
        raise ShapeError(f"write_ppm supports 1 or 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(payload).tobytes())


def read_ppm(path) -> Tensor4:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise FormatError(f"{path}: not a binary PPM/PGM header", offset=0)
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}",
                          offset=m.start(4))
    c = 3 if kind == b"P6" else 1
    need = m.end() + c * w * h
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, need {need} bytes, "
                          f"have {len(raw)}", offset=len(raw))
    data = np.frombuffer(raw, np.uint8, count=c * w * h, offset=m.end())
    img = data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float32) / 255.0
    return Tensor4(img[None])


def write_png(path, rgb: np.ndarray) -> None:
    """Minimal RGB8 PNG writer (no filtering) for visualization output."""
    h, w, _ = rgb.shape

    def chunk(tag, payload):
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    rows = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))
    out = (b"\x89PNG\r\n\x1a\n"
           + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
           + chunk(b"IDAT", zlib.compress(rows, 6))
           + chunk(b"IEND", b""))
    with open(path, "wb") as fh:
        fh.write(out)


def flow_to_color(flow, max_mag: float | None = None) -> np.ndarray:
    """Hue encodes direction, saturation magnitude; zero flow is white."""
    flow = flow.data if isinstance(flow, Tensor4) else np.asarray(flow)
    if flow.ndim == 4:
        flow = flow[0]
    u, v = flow[0], flow[1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    scale = max_mag if max_mag > 0 else 1.0
    sat = np.clip(mag / scale, 0.0, 1.0)
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = 1.0 - sat
    q = 1.0 - f * sat
    t = 1.0 - (1.0 - f) * sat
    one = np.ones_like(sat)
    r = np.choose(i, [one, q, p, p, t, one])
    g = np.choose(i, [t, one, one, q, p, p])
    b = np.choose(i, [p, p, t, one, one, q])
    return _to_uint8(np.stack([r, g, b], axis=-1))


def save_image(path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 image as PNG or PPM based on the extension."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png(path, rgb)
    else:
        write_ppm(path, rgb.transpose(2, 0, 1).astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# datasets on disk


def pad_to_multiple(sample: Sample, multiple: int) -> Sample:
    """Replicate-pad frames (and labels) so extents divide ``multiple``."""
    _, _, h, w = sample.frame1.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if not ph and not pw:
        return sample
    pad = ((0, 0), (0, 0), (0, ph), (0, pw))

    def p(t):
        return np.pad(t.data, pad, mode="edge")

    return Sample(frame1=Tensor4(p(sample.frame1)), frame2=Tensor4(p(sample.frame2)),
                  flow_fwd=FlowField(p(sample.flow_fwd)),
                  flow_bwd=None if sample.flow_bwd is None
                  else FlowField(p(sample.flow_bwd)),
                  id=sample.id, orig_hw=(h, w))


def crop_prediction(flow: np.ndarray, orig_hw: tuple | None) -> np.ndarray:
    if orig_hw is None:
        return flow
    h, w = orig_hw
    return np.ascontiguousarray(flow[:, :, :h, :w])


def save_dataset(samples, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        write_ppm(out / f"{s.id}_img1.ppm", s.frame1)
        write_ppm(out / f"{s.id}_img2.ppm", s.frame2)
        write_flo(out / f"{s.id}_flow.flo", s.flow_fwd)
        if s.flow_bwd is not None:
            write_flo(out / f"{s.id}_bwd.flo", s.flow_bwd)
        ids.append(s.id)
    manifest = {"layout": "paired", "count": len(ids), "ids": sorted(ids)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def synth_dataset(count: int, size: tuple, spec: MotionSpec, seed: int):
    return [synth_pair(spec, size, seed, sample_id=f"s{i:04d}")
            for i in range(count)]


def _paired_ids(root: Path):
    return sorted(p.name[:-len("_img1.ppm")] for p in root.glob("*_img1.ppm"))


def ingest_dataset(root, layout: str = "paired", pad_multiple: int = 1,
                   strict: bool = False):
    """Lazily yield samples sorted by id, padding frames for the pyramid.

    ``paired`` expects ``<id>_img1.ppm / <id>_img2.ppm / <id>_flow.flo``
    triples (optional ``<id>_bwd.flo``); ``sintel-like`` expects
    ``frames/<scene>/*.ppm`` with ``flow/<scene>/<stem>.flo`` for each
    consecutive pair.  Pairs with missing flow are skipped with a warning, or
    rejected in strict mode.
    """
    root = Path(root)
    if layout == "paired":
        ids = _paired_ids(root)
        if strict and not ids:
            raise FileNotFoundError(f"no samples found under {root}")
        for sid in ids:
            flo = root / f"{sid}_flow.flo"
            if not flo.exists():
                if strict:
                    raise FileNotFoundError(f"missing flow for pair {sid!r}: {flo}")
                print(f"warning: skipping {sid!r}, no flow file", file=sys.stderr)
                continue
            bwd_path = root / f"{sid}_bwd.flo"
            sample = Sample(frame1=read_ppm(root / f"{sid}_img1.ppm"),
                            frame2=read_ppm(root / f"{sid}_img2.ppm"),
                            flow_fwd=read_flo(flo),
                            flow_bwd=read_flo(bwd_path) if bwd_path.exists() else None,
                            id=sid)
            yield pad_to_multiple(sample, pad_multiple)
    elif layout == "sintel-like":
        frame_root = root / "frames"
        scenes = sorted(d.name for d in frame_root.iterdir() if d.is_dir()) \
            if frame_root.is_dir() else []
        if strict and not scenes:
            raise FileNotFoundError(f"no scenes found under {frame_root}")
        for scene in scenes:
            frames = sorted((frame_root / scene).glob("*.ppm"))
            for a, b in zip(frames, frames[1:]):
                flo = root / "flow" / scene / (a.stem + ".flo")
                sid = f"{scene}/{a.stem}"
                if not flo.exists():
                    if strict:
                        raise FileNotFoundError(f"missing flow for pair {sid!r}: {flo}")
                    print(f"warning: skipping {sid!r}, no flow file", file=sys.stderr)
                    continue
                sample = Sample(frame1=read_ppm(a), frame2=read_ppm(b),
                                flow_fwd=read_flo(flo), flow_bwd=None, id=sid)
                yield pad_to_multiple(sample, pad_multiple)
    else:
        raise ValueError(f"unknown dataset layout: {layout!r}")
