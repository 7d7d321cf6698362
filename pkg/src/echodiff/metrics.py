"""
Image-quality metrics: MSE, PSNR, SSIM and the Fréchet distance between
Gaussian fits of dataset features.

Pixel metrics work on the 0-255 display scale; callers holding [-1, 1]
images convert with :func:`echodiff.data.to_display` first.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .data import Dataset, to_display


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value: float = 255.0) -> Optional[float]:
    """Peak signal-to-noise ratio in dB; ``None`` for identical images."""
    if max_value <= 0:
        raise MetricError(f"max_value must be positive, got {max_value}")
    return psnr_from_mse(mse(a, b), max_value)


def psnr_from_mse(err: float, max_value: float = 255.0) -> Optional[float]:
    if err == 0:
        return None
    return 10.0 * math.log10(max_value ** 2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    half = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, max_value: float = 255.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully-contained Gaussian windows."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise MetricError(f"ssim expects 2-D images, got shape {a.shape}")
    if min(a.shape) < window:
        raise MetricError(f"image {a.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    w = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- features ------------------------------------------------------------------
def handcrafted_features(image) -> np.ndarray:
    """83-dim descriptor: 8x8 block means, 16-bin histogram, gradient stats.

    ``image`` is on the display scale (0-255).
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if h % 8 or w % 8:
        raise MetricError(f"feature extractor needs sides divisible by 8, got {img.shape}")
    blocks = img.reshape(8, h // 8, 8, w // 8).mean(axis=(1, 3)).ravel()
    hist = np.histogram(np.clip(img, 0, 255), bins=16, range=(0.0, 256.0))[0] / img.size
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    grad = np.array([mag.mean(), mag.std(), np.percentile(mag, 90)])
    return np.concatenate([blocks, hist, grad])


EXTRACTORS: dict = {"handcrafted-v1": handcrafted_features}


def extract_features(image, extractor: str = "handcrafted-v1") -> np.ndarray:
    try:
        fn = EXTRACTORS[extractor]
    except KeyError:
        raise MetricError(f"unknown feature extractor {extractor!r}") from None
    return fn(image)


# -- Fréchet distance -------------------------------------------------------------
@dataclass
class FeatureStats:
    n: int
    mu: np.ndarray
    sigma: np.ndarray
    shrinkage: float = 0.0

    @classmethod
    def from_features(cls, feats: np.ndarray, shrink: float = 1e-6) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < 2:
            raise MetricError(f"need at least 2 samples for a covariance, got {n}")
        sigma = np.cov(feats, rowvar=False).reshape(d, d)
        sigma = (sigma + sigma.T) / 2
        applied = 0.0
        if n < d + 1:
            sigma = sigma + shrink * np.eye(d)
            applied = shrink
        return cls(n, feats.mean(axis=0), sigma, applied)


def sqrtm_psd(s: np.ndarray) -> np.ndarray:
    """Symmetric square root; negative eigenvalues are clipped to zero."""
    s = np.asarray(s, dtype=np.float64)
    try:
        vals, vecs = np.linalg.eigh((s + s.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"eigendecomposition failed: {exc}") from None
    root = (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T
    return (root + root.T) / 2


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise MetricError(f"feature dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    ra = sqrtm_psd(a.sigma)
    cross = sqrtm_psd(ra @ b.sigma @ ra)
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross)
    return max(float(value), 0.0)


def dataset_stats(images: Sequence, extractor: str = "handcrafted-v1") -> FeatureStats:
    """``images`` on the display scale."""
    return FeatureStats.from_features(np.stack([extract_features(im, extractor) for im in images]))


def dataset_fid(x: Dataset, y: Dataset, extractor: str = "handcrafted-v1") -> float:
    sx = dataset_stats([to_display(s.image) for s in x], extractor)
    sy = dataset_stats([to_display(s.image) for s in y], extractor)
    return frechet_distance(sx, sy)


# -- reports ---------------------------------------------------------------------
@dataclass
class MetricRow:
    id: str
    mse: float
    psnr_db: Optional[float]
    ssim: float


def _mean_std(values: list) -> Optional[tuple]:
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    fid: dict = field(default_factory=dict)  # label -> value
    metadata: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        """Mean and sample standard deviation per metric; PSNR skips null rows."""
        return {
            "mse": _mean_std([r.mse for r in self.rows]),
            "psnr_db": _mean_std([r.psnr_db for r in self.rows if r.psnr_db is not None]),
            "ssim": _mean_std([r.ssim for r in self.rows]),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["id", "mse", "psnr_db", "ssim"])
        for r in self.rows:
            wr.writerow([r.id, _num(r.mse), _num(r.psnr_db), _num(r.ssim)])
        agg = self.aggregate()
        if self.rows:
            for label, idx in (("#mean", 0), ("#std", 1)):
                wr.writerow([label] + [_num(agg[k][idx]) if agg[k] else "null"
                                       for k in ("mse", "psnr_db", "ssim")])
        for label, value in self.fid.items():
            wr.writerow([f"#fid:{label}", _num(value), "", ""])
        return buf.getvalue()

    def to_json(self) -> str:
        agg = self.aggregate()
        doc = {
            "metadata": self.metadata,
            "rows": [{"id": r.id, "mse": r.mse, "psnr_db": r.psnr_db, "ssim": r.ssim}
                     for r in self.rows],
            "aggregate": {k: (None if v is None else {"mean": v[0], "std": v[1]})
                          for k, v in agg.items()},
            "fid": self.fid,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _num(v) -> str:
    return "null" if v is None else repr(float(v))


def evaluate_translation(generated: Dataset, reference: Dataset,
                         ground_truth: Optional[Dataset] = None,
                         source: Optional[Dataset] = None,
                         extractor: str = "handcrafted-v1",
                         metadata: Optional[dict] = None) -> MetricsReport:
    """Paired pixel metrics (when ``ground_truth`` given) plus FID against ``reference``.

    With ``source``, a second FID (source vs reference) records the
    pre-translation distance.
    """
    report = MetricsReport(metadata=dict(metadata or {}))
    report.metadata.update({
        "generated": generated.domain_tag, "reference": reference.domain_tag,
        "feature_extractor": extractor,
    })
    if ground_truth is not None:
        gt = {s.id: s for s in ground_truth}
        gen_ids, gt_ids = set(generated.ids), set(gt)
        if len(generated) != len(ground_truth) or gen_ids != gt_ids:
            offenders = sorted(gen_ids ^ gt_ids)
            raise MetricError(f"paired evaluation needs matching ids; offenders: "
                              f"{', '.join(offenders) or '(count mismatch)'}")
        report.metadata["ground_truth"] = ground_truth.domain_tag
        for s in generated:
            a, b = to_display(s.image), to_display(gt[s.id].image)
            err = mse(a, b)
            report.rows.append(MetricRow(s.id, err, psnr_from_mse(err), ssim(a, b)))

    ref_stats = dataset_stats([to_display(s.image) for s in reference], extractor)
    gen_stats = dataset_stats([to_display(s.image) for s in generated], extractor)
    shrunk = {}
    report.fid["generated_vs_reference"] = frechet_distance(gen_stats, ref_stats)
    if source is not None:
        src_stats = dataset_stats([to_display(s.image) for s in source], extractor)
        report.fid["source_vs_reference"] = frechet_distance(src_stats, ref_stats)
        report.metadata["source"] = source.domain_tag
        shrunk["source"] = src_stats.shrinkage
    shrunk.update(generated=gen_stats.shrinkage, reference=ref_stats.shrinkage)
    report.metadata["covariance_shrinkage"] = shrunk
    return report
