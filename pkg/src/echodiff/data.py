"""
Guided samples, on-disk datasets and a seeded echocardiography-like phantom.

Images live in [-1, 1] internally and are stored as 8-bit grayscale PNG.
Masks use class codes background=0, LV=1, MYO=2, LA=3; on disk and as a
generator guide they are rendered as gray levels LV=255, MYO=170, LA=85,
background=0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

BACKGROUND, LV, MYO, LA = 0, 1, 2, 3
CLASS_CODES = (BACKGROUND, LV, MYO, LA)
GRAY_LEVELS = np.array([0, 255, 170, 85], dtype=np.uint8)  # indexed by class code

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "#echodiff-manifest 1"
_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


class DataError(Exception):
    pass


class EmptyDatasetError(DataError):
    pass


class MissingPairError(DataError):
    def __init__(self, stems):
        self.stems = sorted(stems)
        super().__init__(f"unpaired or missing files for: {', '.join(self.stems)}")


class UnreadableFileError(DataError):
    pass


class ManifestError(DataError):
    pass


class DomainMismatchError(DataError):
    pass


# -- samples --------------------------------------------------------------------
@dataclass
class GuidedSample:
    id: str
    image: np.ndarray  # float32, [-1, 1]
    mask: np.ndarray  # uint8 class codes
    domain_tag: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape} "
                            f"and mask {self.mask.shape} differ")
        check_mask(self.mask, self.id)


@dataclass
class Dataset:
    samples: list
    domain_tag: str
    provenance: str = ""

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids: {', '.join(dup)}")
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise DataError(f"samples have mixed shapes: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])


def check_mask(mask: np.ndarray, where: str = "mask") -> None:
    bad = np.setdiff1d(np.unique(mask), CLASS_CODES)
    if bad.size:
        raise DataError(f"{where}: unknown class codes {bad.tolist()}")


# -- display scale helpers -----------------------------------------------------
def to_display(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] as float."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def from_display(v: np.ndarray) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap a [-1, 1] image to the 8-bit storage grid."""
    return from_display(to_uint8(x))


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(to_display(x)), 0, 255).astype(np.uint8)


# -- mask encodings -------------------------------------------------------------
def encode_mask_gray(mask: np.ndarray) -> np.ndarray:
    """Class map -> single-plane guide in [-1, 1]."""
    check_mask(mask)
    return from_display(GRAY_LEVELS[mask])


def decode_mask_gray(guide: np.ndarray) -> np.ndarray:
    """Nearest-level inverse of :func:`encode_mask_gray` (accepts [-1, 1] values)."""
    d = to_display(guide)
    idx = np.abs(d[..., None] - GRAY_LEVELS.astype(np.float64)).argmin(axis=-1)
    return idx.astype(np.uint8)


def encode_mask_onehot(mask: np.ndarray) -> np.ndarray:
    """Class map -> four planes (background, LV, MYO, LA) holding -1 or 1."""
    check_mask(mask)
    planes = np.stack([mask == c for c in CLASS_CODES]).astype(np.float32)
    return planes * 2.0 - 1.0


def encode_guide(mask: np.ndarray, mode: str = "gray") -> np.ndarray:
    """(C, H, W) guide planes for the generator."""
    if mode == "gray":
        return encode_mask_gray(mask)[None]
    if mode == "onehot":
        return encode_mask_onehot(mask)
    raise ValueError(f"unknown guide mode {mode!r}")


# -- resampling -----------------------------------------------------------------
def resize(image: np.ndarray, side: int, kind: str = "image") -> np.ndarray:
    """Resize to ``side`` x ``side``: bilinear for images, nearest for masks."""
    if side < 16:
        raise ValueError(f"target side must be >= 16, got {side}")
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    h, w = image.shape
    if kind == "mask":
        rows = np.minimum(((np.arange(side) + 0.5) * h / side).astype(int), h - 1)
        cols = np.minimum(((np.arange(side) + 0.5) * w / side).astype(int), w - 1)
        return image[rows[:, None], cols[None, :]]
    if kind != "image":
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")

    def axis(n_in):
        src = np.clip((np.arange(side) + 0.5) * n_in / side - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    img = image.astype(np.float64)
    top = img[r0][:, c0] + (img[r0][:, c1] - img[r0][:, c0]) * fc
    bot = img[r1][:, c0] + (img[r1][:, c1] - img[r1][:, c0]) * fc
    out = top + (bot - top) * fr[:, None]
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def resize_sample(sample: GuidedSample, side: int) -> GuidedSample:
    if sample.image.shape == (side, side):
        return sample
    img = np.clip(resize(sample.image, side), -1, 1).astype(np.float32)
    return GuidedSample(sample.id, img, resize(sample.mask, side, "mask"), sample.domain_tag)


def resize_dataset(ds: Dataset, side: int) -> Dataset:
    return Dataset([resize_sample(s, side) for s in ds], ds.domain_tag, ds.provenance)


# -- splitting ------------------------------------------------------------------
def split(ds: Dataset, fraction: float = 0.9, seed: int = 0):
    """Seeded shuffle, then the first ``round(n * fraction)`` samples train."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(ds)
    n_train = int(round(n * fraction))
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} samples at {fraction} leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: Dataset([ds[int(i)] for i in idx], ds.domain_tag, ds.provenance)  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:])


# -- disk format ------------------------------------------------------------------
def write_dataset(ds: Dataset, root) -> Path:
    """Write PNGs and the manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    _check_token(ds.domain_tag, "domain tag")
    stray = [s.id for s in ds if s.domain_tag != ds.domain_tag]
    if stray:
        raise DomainMismatchError(f"samples not tagged {ds.domain_tag!r}: {', '.join(stray)}")
    lines = [MANIFEST_HEADER, f"#domain {ds.domain_tag}",
             f"#provenance {' '.join(ds.provenance.split())}"]
    for s in ds:
        _check_token(s.id, "sample id")
        img_rel, mask_rel = f"images/{s.id}.png", f"masks/{s.id}.png"
        Image.fromarray(to_uint8(s.image), mode="L").save(root / img_rel, optimize=False)
        Image.fromarray(GRAY_LEVELS[s.mask], mode="L").save(root / mask_rel, optimize=False)
        lines.append("\t".join([s.id, img_rel, mask_rel, s.domain_tag]))
    path = root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def _check_token(value: str, what: str) -> None:
    if not _ID_RE.match(value):
        raise DataError(f"{what} {value!r} must match [A-Za-z0-9._-]+")


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from None


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        if not root.exists() or not any(root.iterdir()):
            raise EmptyDatasetError(f"{root}: no dataset found (empty or missing directory)")
        raise ManifestError(f"{root}: missing {MANIFEST_NAME}")
    text = mpath.read_text().splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{mpath} line 1: expected {MANIFEST_HEADER!r}")
    domain, provenance, records = None, "", []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#domain "):
            domain = line[len("#domain "):].strip()
        elif line.startswith("#provenance"):
            provenance = line[len("#provenance"):].strip()
        elif line.startswith("#"):
            continue
        else:
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"{mpath} line {lineno}: expected 4 tab-separated fields")
            records.append((lineno, *parts))
    if domain is None:
        raise ManifestError(f"{mpath}: missing '#domain' line")
    if not records:
        raise EmptyDatasetError(f"{root}: manifest lists no samples")

    wrong = [f"{sid} (line {ln}: {tag})" for ln, sid, _, _, tag in records if tag != domain]
    if wrong:
        raise DomainMismatchError(f"{mpath}: samples tagged differently from domain "
                                  f"{domain!r}: {', '.join(wrong)}")

    img_stems = {p.stem for p in (root / "images").glob("*.png")}
    mask_stems = {p.stem for p in (root / "masks").glob("*.png")}
    listed = {sid for _, sid, _, _, _ in records}
    unpaired = (img_stems ^ mask_stems) | {sid for _, sid, ip, mp, _ in records
                                           if not (root / ip).exists() or not (root / mp).exists()}
    if unpaired:
        raise MissingPairError(unpaired)
    unlisted = (img_stems | mask_stems) - listed
    if unlisted:
        raise MissingPairError(unlisted)

    samples = []
    for _, sid, ip, mp, tag in records:
        img = from_display(_read_png(root / ip))
        raw = _read_png(root / mp)
        stray = np.setdiff1d(np.unique(raw), GRAY_LEVELS)
        if stray.size:
            raise DataError(f"{root / mp}: gray values {stray.tolist()} are not class levels")
        mask = decode_mask_gray(from_display(raw))
        samples.append(GuidedSample(sid, img, mask, tag))
    return Dataset(samples, domain, provenance)


# -- phantoms ---------------------------------------------------------------------
@dataclass(frozen=True)
class PhantomStyle:
    """Scanner stand-in: sector aperture, speckle grain and gray-level response."""

    half_aperture_deg: float
    grain: float  # gaussian smoothing (px at side 64) of the complex speckle field
    gain: float
    gamma: float
    tissue: float
    myocardium: float
    blood: float
    attenuation: float


STYLES = {
    "a": PhantomStyle(40.0, 0.6, 1.0, 1.0, 0.35, 0.85, 0.04, 0.35),
    "b": PhantomStyle(30.0, 1.5, 0.8, 0.55, 0.50, 0.70, 0.10, 0.70),
    "c": PhantomStyle(34.0, 1.1, 1.15, 1.4, 0.25, 0.75, 0.02, 0.15),
}


def _speckle(rng, side: int, grain: float) -> np.ndarray:
    re_, im_ = rng.standard_normal((2, side, side))
    sigma = grain * side / 64
    if sigma > 0:
        re_, im_ = gaussian_filter(re_, sigma), gaussian_filter(im_, sigma)
    amp = np.sqrt(re_ ** 2 + im_ ** 2)
    return amp / np.sqrt(np.mean(amp ** 2))


def _ellipse(x, y, cx, cy, ax, ay, tilt):
    c, s = np.cos(tilt), np.sin(tilt)
    u = ((x - cx) * c + (y - cy) * s) / ax
    v = (-(x - cx) * s + (y - cy) * c) / ay
    return u * u + v * v <= 1.0


def phantom_sample(rng: np.random.Generator, side: int, style: PhantomStyle):
    """One (image, mask) pair; image quantized to the 8-bit grid."""
    yy, xx = (np.mgrid[0:side, 0:side] + 0.5) / side
    apex_y = 0.03
    r = np.hypot(xx - 0.5, yy - apex_y)
    ang = np.degrees(np.arctan2(xx - 0.5, yy - apex_y))
    cone = (r <= 0.95) & (np.abs(ang) <= style.half_aperture_deg) & (yy >= apex_y)

    j = lambda lo, hi: rng.uniform(lo, hi)  # noqa: E731
    tilt = j(-0.15, 0.15)
    lv_c = (0.5 + j(-0.03, 0.03), 0.45 + j(-0.03, 0.03))
    lv_ax, lv_ay = j(0.085, 0.11), j(0.17, 0.21)
    wall = j(0.035, 0.05)
    la_ax, la_ay = j(0.08, 0.11), j(0.07, 0.09)
    la_c = (lv_c[0] + j(-0.02, 0.02), lv_c[1] + lv_ay + wall + la_ay * 0.8)

    outer = _ellipse(xx, yy, *lv_c, lv_ax + wall, lv_ay + wall, tilt)
    inner = _ellipse(xx, yy, *lv_c, lv_ax, lv_ay, tilt)
    atrium = _ellipse(xx, yy, *la_c, la_ax, la_ay, 0.0)
    mask = np.zeros((side, side), np.uint8)
    mask[outer & cone] = MYO
    mask[atrium & ~outer & cone] = LA
    mask[inner & cone] = LV

    echo = np.full((side, side), style.tissue)
    echo[mask == MYO] = style.myocardium
    echo[(mask == LV) | (mask == LA)] = style.blood
    echo = gaussian_filter(echo, 0.6 * side / 64)
    echo *= np.exp(-style.attenuation * np.clip(r, 0, 1))
    img = echo * _speckle(rng, side, style.grain)
    img = np.clip(style.gain * np.clip(img, 0, None) ** style.gamma, 0, 1)
    img[~cone] = 0.0
    return quantize(img * 2.0 - 1.0), mask


def generate_phantoms(n: int, side: int = 64, domain_style: str = "a", seed: int = 0,
                      domain_tag: Optional[str] = None) -> Dataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if domain_style not in STYLES:
        raise ValueError(f"unknown style {domain_style!r}; valid styles: {', '.join(STYLES)}")
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    style = STYLES[domain_style]
    tag = domain_tag or f"phantom-{domain_style}"
    children = np.random.SeedSequence([seed, ord(domain_style)]).spawn(n)
    samples = []
    for i, ss in enumerate(children):
        img, mask = phantom_sample(np.random.default_rng(ss), side, style)
        samples.append(GuidedSample(f"{domain_style}{i:05d}", img, mask, tag))
    return Dataset(samples, tag, f"phantom style={domain_style} n={n} side={side} seed={seed}")
