"""Metric protocol: PSNR, SSIM and pluggable neural metrics (LPIPS, CLIP).

Image metrics run on white-composited float images in [0, 1]. Neural
metrics go through a backend object: a deterministic random-projection
stub for plumbing tests, or a remote HTTP service sharing the guidance
module's envelope (endpoints /embed and /lpips).
"""

from __future__ import annotations

import base64
import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from scipy.signal import convolve2d

from .guidance import CapabilityError
from .scene import read_rgba

PSNR_CAP_DB = 99.0


class WindowError(ValueError):
    """Image too small for the SSIM window."""


def composite_white(rgba: np.ndarray) -> np.ndarray:
    """(H, W, 4) premultiply-free alpha composite over a white ground."""
    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.ndim != 3 or rgba.shape[2] not in (3, 4):
        raise ValueError("expected (H, W, 3|4) image")
    if rgba.shape[2] == 3:
        return rgba
    a = rgba[..., 3:4]
    return rgba[..., :3] * a + (1.0 - a)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred: np.ndarray, gt: np.ndarray, k1: float = 0.01,
         k2: float = 0.03, window: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM with the standard Gaussian window, channel-averaged."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    h, w = pred.shape[:2]
    if h < window or w < window:
        raise WindowError(f"image {h}x{w} smaller than the {window}x{window} window")

    kernel = _gaussian_kernel(window, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2

    def filt(x):
        return convolve2d(x, kernel, mode="valid")

    vals = []
    for c in range(pred.shape[2]):
        p, g = pred[..., c], gt[..., c]
        mu_p, mu_g = filt(p), filt(g)
        var_p = filt(p * p) - mu_p ** 2
        var_g = filt(g * g) - mu_g ** 2
        cov = filt(p * g) - mu_p * mu_g
        num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
        den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
        vals.append(num / den)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Neural metric backends
# ---------------------------------------------------------------------------

class MetricBackend:
    identifier: str = "abstract"

    def embed(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lpips(self, a: np.ndarray, b: np.ndarray) -> float:
        raise NotImplementedError


class StubMetricBackend(MetricBackend):
    """Fixed random projection; deterministic, used to test plumbing only."""

    def __init__(self, dim: int = 64, seed: int = 0, patch: int = 32):
        self.dim = dim
        self.seed = seed
        self.patch = patch
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, patch * patch * 3)) / np.sqrt(dim)
        self.identifier = f"stub:dim={dim}:seed={seed}"

    def _pool(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.shape[2] == 4:
            img = composite_white(img)
        h, w = img.shape[:2]
        ys = np.linspace(0, h - 1, self.patch).round().astype(int)
        xs = np.linspace(0, w - 1, self.patch).round().astype(int)
        return img[np.ix_(ys, xs)].reshape(-1)

    def embed(self, image: np.ndarray) -> np.ndarray:
        return self._proj @ self._pool(image)

    def lpips(self, a: np.ndarray, b: np.ndarray) -> float:
        ea, eb = self.embed(a), self.embed(b)
        return float(np.mean((ea - eb) ** 2))


class RemoteMetricBackend(MetricBackend):
    """HTTP metric service: POST /embed and /lpips, base64 f32 payloads."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.identifier = f"remote:{self.endpoint}"

    def _post(self, path: str, body: dict) -> dict:
        last = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.endpoint + path, json=body,
                                     timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as err:
                last = err
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise CapabilityError(
            f"{self.endpoint}{path} failed after {self.retries} attempts: {last}")

    @staticmethod
    def _img_b64(image: np.ndarray) -> tuple[str, list[int]]:
        arr = np.ascontiguousarray(image, dtype="<f4")
        return base64.b64encode(arr.tobytes()).decode("ascii"), list(arr.shape)

    def embed(self, image: np.ndarray) -> np.ndarray:
        blob, shape = self._img_b64(image)
        payload = self._post("/embed", {"image_b64": blob, "shape": shape})
        return np.frombuffer(base64.b64decode(payload["embedding_b64"]),
                             dtype="<f4").astype(np.float64)

    def lpips(self, a: np.ndarray, b: np.ndarray) -> float:
        blob_a, shape = self._img_b64(a)
        blob_b, shape_b = self._img_b64(b)
        if shape != shape_b:
            raise ValueError("lpips inputs must share a shape")
        payload = self._post("/lpips", {"image_a_b64": blob_a,
                                        "image_b_b64": blob_b,
                                        "shape": shape})
        return float(payload["value"])


def neural_metric(pred: np.ndarray, gt_or_ref: np.ndarray, kind: str,
                  backend: MetricBackend | None) -> float:
    """LPIPS distance (lower better) or CLIP cosine similarity (higher)."""
    if backend is None:
        raise CapabilityError("no metric backend configured")
    if kind == "lpips":
        return backend.lpips(pred, gt_or_ref)
    if kind == "clip":
        ea = backend.embed(pred)
        eb = backend.embed(gt_or_ref)
        if np.array_equal(ea, eb):
            return 1.0
        denom = np.linalg.norm(ea) * np.linalg.norm(eb)
        if denom == 0.0:
            return 0.0
        return float(np.dot(ea, eb) / denom)
    raise ValueError(f"unknown metric kind {kind!r}")


# ---------------------------------------------------------------------------
# Subject evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalPair:
    pred: np.ndarray                 # white-composited (H, W, 3)
    gt: np.ndarray | None = None
    view_tag: str = "novel"          # reference | novel

    def __post_init__(self):
        if self.view_tag not in ("reference", "novel"):
            raise ValueError("view_tag must be 'reference' or 'novel'")
        if self.gt is not None and self.pred.shape != self.gt.shape:
            raise ValueError("pred and gt resolutions must match")


@dataclass
class MetricsReport:
    subject: str
    protocol: str
    per_view: dict[str, dict[str, float]] = field(default_factory=dict)
    summary: dict[str, float] = field(default_factory=dict)
    view_count: int = 0
    backends: dict[str, str] = field(default_factory=dict)
    missing_views: list[str] = field(default_factory=list)
    partial: bool = False
    schema_version: int = 1

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": self.schema_version,
            "subject": self.subject,
            "protocol": self.protocol,
            "per_view": self.per_view,
            "summary": self.summary,
            "view_count": self.view_count,
            "backends": self.backends,
            "missing_views": self.missing_views,
            "partial": self.partial,
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        raw = json.loads(text)
        version = raw.pop("schema_version", 1)
        report = MetricsReport(**raw)
        report.schema_version = version
        return report


def _summarize(per_view: dict[str, dict[str, float]]) -> dict[str, float]:
    pools: dict[str, list[float]] = {}
    for metrics in per_view.values():
        for name, value in metrics.items():
            pools.setdefault(name, []).append(value)
    return {name: float(np.mean(vals)) for name, vals in pools.items()}


def aggregate_reports(reports: list[MetricsReport]) -> dict[str, float]:
    """Cross-subject aggregate: arithmetic mean of per-subject summaries."""
    pools: dict[str, list[float]] = {}
    for report in reports:
        for name, value in report.summary.items():
            pools.setdefault(name, []).append(value)
    return {name: float(np.mean(vals)) for name, vals in pools.items()}


def _load_view(path: Path) -> np.ndarray:
    return composite_white(read_rgba(path))


def _view_names(n_novel: int) -> list[str]:
    return [f"view_{i:02d}" for i in range(n_novel + 1)]


def evaluate_subject(run_dir, gt_dir=None, protocol: str = "thuman",
                     backend: MetricBackend | None = None,
                     n_novel: int = 10, subject: str | None = None,
                     ) -> MetricsReport:
    """Score one subject's turntable renders.

    thuman: PSNR/SSIM/LPIPS/CLIP per view against GT renders with the
    same file names (view_00 is the reference view, the rest novel).
    sshq: no multi-view GT; LPIPS between the reference-view render and
    the input image (run_dir/reference.png when gt_dir is None), plus
    CLIP between the input and every novel view.
    """
    run_dir = Path(run_dir)
    subject = subject or run_dir.name
    names = _view_names(n_novel)
    report = MetricsReport(subject=subject, protocol=protocol)
    if backend is not None:
        report.backends = {"lpips": backend.identifier,
                           "clip": backend.identifier}

    if protocol == "thuman":
        if gt_dir is None:
            raise ValueError("thuman protocol needs a GT directory")
        gt_dir = Path(gt_dir)
        for name in names:
            pred_path = run_dir / f"{name}.png"
            gt_path = gt_dir / f"{name}.png"
            if not pred_path.exists() or not gt_path.exists():
                report.missing_views.append(name)
                continue
            pred = _load_view(pred_path)
            gt = _load_view(gt_path)
            metrics = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
            if backend is not None:
                metrics["lpips"] = neural_metric(pred, gt, "lpips", backend)
                metrics["clip"] = neural_metric(pred, gt, "clip", backend)
            report.per_view[name] = metrics
    elif protocol == "sshq":
        if backend is None:
            raise CapabilityError("sshq protocol needs a metric backend")
        ref_path = Path(gt_dir) if gt_dir is not None else run_dir / "reference.png"
        if not ref_path.exists():
            raise FileNotFoundError(f"input reference image missing: {ref_path}")
        reference = _load_view(ref_path)
        front_path = run_dir / f"{names[0]}.png"
        if front_path.exists():
            pred = _load_view(front_path)
            report.per_view[names[0]] = {
                "lpips": neural_metric(pred, reference, "lpips", backend)}
        else:
            report.missing_views.append(names[0])
        for name in names[1:]:
            path = run_dir / f"{name}.png"
            if not path.exists():
                report.missing_views.append(name)
                continue
            novel = _load_view(path)
            report.per_view[name] = {
                "clip": neural_metric(reference, novel, "clip", backend)}
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    report.view_count = len(report.per_view)
    report.partial = bool(report.missing_views)
    report.summary = _summarize(report.per_view)
    if report.partial:
        warnings.warn(f"{subject}: missing views {report.missing_views}",
                      UserWarning)
    return report


def save_report(path, report: MetricsReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    """One row per subject plus a cross-subject mean row."""
    metric_names = sorted({name for r in reports for name in r.summary})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "protocol", "views"] + metric_names)
        for r in reports:
            writer.writerow(
                [r.subject, r.protocol, r.view_count]
                + [f"{r.summary[m]:.6f}" if m in r.summary else ""
                   for m in metric_names])
        agg = aggregate_reports(reports)
        writer.writerow(
            ["mean", "", sum(r.view_count for r in reports)]
            + [f"{agg[m]:.6f}" if m in agg else "" for m in metric_names])
