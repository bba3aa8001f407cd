"""Evaluation: average end-point error, magnitude breakdowns, comparisons.

Reports are deterministic: the serialized JSON and markdown contain only
results and the configuration fingerprint (timing is kept in memory but
never written), so identical inputs produce byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import network
from .flowops import FlowField, as_flow_array
from .tensor import ShapeError

MAG_BUCKETS = ((0.0, 10.0), (10.0, 40.0), (40.0, float("inf")))
BUCKET_LABELS = ("aee_0_10", "aee_10_40", "aee_40_plus")


def aee(w, w_hat) -> float:
    """Mean Euclidean distance between the two flow fields, in pixels."""
    w = as_flow_array(w, "predicted flow")
    w_hat = as_flow_array(w_hat, "target flow")
    if w.shape != w_hat.shape:
        raise ShapeError(f"aee: shapes differ: {w.shape} vs {w_hat.shape}")
    d = w - w_hat
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def endpoint_errors(w, w_hat) -> np.ndarray:
    w = as_flow_array(w)
    w_hat = as_flow_array(w_hat)
    d = w - w_hat
    return np.sqrt((d * d).sum(axis=1))


@dataclass
class EvalReport:
    per_sample: dict               # id -> (aee, pixel count)
    mean_aee: float
    buckets: dict                  # label -> (mean epe, pixel count)
    fingerprint: str
    n_samples: int
    runtime: dict = field(default_factory=dict)  # in-memory only

    def to_json(self) -> str:
        payload = {
            "fingerprint": self.fingerprint,
            "n_samples": self.n_samples,
            "mean_aee": self.mean_aee,
            "buckets": {k: list(v) for k, v in sorted(self.buckets.items())},
            "per_sample": {k: list(v) for k, v in sorted(self.per_sample.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(per_sample={k: tuple(v) for k, v in d["per_sample"].items()},
                   mean_aee=d["mean_aee"],
                   buckets={k: tuple(v) for k, v in d["buckets"].items()},
                   fingerprint=d["fingerprint"], n_samples=d["n_samples"])

    def to_markdown(self, label: str = "model") -> str:
        rows = [f"| {label} | {self.mean_aee:.4f} | "
                + " | ".join(f"{self.buckets[b][0]:.4f}"
                             if self.buckets[b][1] else "-"
                             for b in BUCKET_LABELS) + " |"]
        header = ("| config | AEE | 0-10 px | 10-40 px | 40+ px |\n"
                  "|---|---|---|---|---|")
        return header + "\n" + "\n".join(rows)


def config_fingerprint(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(predict, samples, fingerprint: str = "", dump_dir=None) -> EvalReport:
    """Run ``predict(sample) -> flow array (1, 2, h, w)`` over a dataset.

    Predictions are cropped back to each sample's original extents before
    scoring; optionally dumps them as .flo plus color renderings.
    """
    per_sample = {}
    bucket_sums = {b: [0.0, 0] for b in BUCKET_LABELS}
    total_err = 0.0
    total_px = 0
    t0 = time.perf_counter()
    n = 0
    dump = Path(dump_dir) if dump_dir else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        pred = np.asarray(predict(sample))
        pred = datamod.crop_prediction(pred, sample.orig_hw)
        gt = sample.flow_fwd.data
        gt = datamod.crop_prediction(gt, sample.orig_hw)
        err = endpoint_errors(pred, gt)
        mag = np.sqrt((gt * gt).sum(axis=1))
        px = err.size
        per_sample[sample.id] = (float(err.mean()), px)
        total_err += float(err.sum())
        total_px += px
        for (lo, hi), label in zip(MAG_BUCKETS, BUCKET_LABELS):
            mask = (mag >= lo) & (mag < hi)
            bucket_sums[label][0] += float(err[mask].sum())
            bucket_sums[label][1] += int(mask.sum())
        if dump:
            safe = sample.id.replace("/", "_")
            datamod.write_flo(dump / f"{safe}.flo", pred)
            datamod.save_image(dump / f"{safe}.png", datamod.flow_to_color(pred))
        n += 1
    buckets = {label: ((s / c if c else 0.0), c)
               for label, (s, c) in bucket_sums.items()}
    return EvalReport(per_sample=per_sample,
                      mean_aee=(total_err / total_px if total_px else 0.0),
                      buckets=buckets, fingerprint=fingerprint, n_samples=n,
                      runtime={"seconds": time.perf_counter() - t0,
                               "samples": n})


def model_predictor(params: network.NetworkParams, cfg: network.NetworkConfig):
    """Prediction callable: full-resolution flow in pixels."""

    def predict(sample):
        _, final = network.fpcrnet_forward(params, sample.frame1.data,
                                           sample.frame2.data, cfg)
        return final.data

    return predict


def oracle_predictor():
    """Returns the ground truth; evaluates to zero error by construction."""

    def predict(sample):
        return sample.flow_fwd.data.copy()

    return predict


def zero_predictor():
    def predict(sample):
        return np.zeros_like(sample.flow_fwd.data)

    return predict


def compare(reports, labels) -> str:
    """Markdown comparison table; best mean AEE is bolded."""
    if len(reports) != len(labels):
        raise ValueError("one label per report required")
    if not reports:
        raise ValueError("no reports to compare")
    fp = reports[0].fingerprint
    for r in reports[1:]:
        if r.fingerprint != fp:
            raise ValueError(
                f"reports evaluate different datasets: {r.fingerprint} vs {fp}")
    best = min(range(len(reports)), key=lambda i: reports[i].mean_aee)
    lines = ["| config | AEE | 0-10 px | 10-40 px | 40+ px |",
             "|---|---|---|---|---|"]
    for i, (r, label) in enumerate(zip(reports, labels)):
        mean = f"**{r.mean_aee:.4f}**" if i == best else f"{r.mean_aee:.4f}"
        cells = [f"{r.buckets[b][0]:.4f}" if r.buckets[b][1] else "-"
                 for b in BUCKET_LABELS]
        lines.append(f"| {label} | {mean} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
