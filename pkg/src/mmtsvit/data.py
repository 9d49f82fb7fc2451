"""Satellite time-series containers, resampling, gap-filling, synthetic data.

A sample on disk is one "MSIT" container holding M modality arrays plus a
class-index label map at the finest spatial resolution. A dataset is a
directory of containers plus a JSON manifest with class names and split
assignment. The synthetic generator stands in for real acquisitions: each
class carries a seasonal (sinusoidal) per-channel signature, modalities
differ in resolution and acquisition dates, and label maps are random
rectangles over a background class.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError

MAGIC = b"MSIT"
VERSION = 1


@dataclass
class SITSSample:
    """One modality's time series (T, H, W, C) with acquisition days-of-year."""

    x: np.ndarray
    dates: list[int]
    modality_id: str = ""

    def __post_init__(self):
        if self.x.ndim != 4:
            raise DataError(f"SITS array must be (T, H, W, C), got shape {self.x.shape}")
        if len(self.dates) != self.x.shape[0]:
            raise DataError(f"{len(self.dates)} dates for {self.x.shape[0]} time steps")
        d = list(self.dates)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise DataError(f"dates must be strictly increasing, got {d}")
        if d and (d[0] < 1 or d[-1] > 366):
            raise DataError(f"dates must lie in [1, 366], got {d}")
        if not np.isfinite(self.x).all():
            raise DataError("SITS array contains non-finite values")


@dataclass
class CoRegisteredSet:
    """M modality samples over one geographic extent plus its label map."""

    samples: list[SITSSample]
    labels: np.ndarray  # (H, W) class indices at the finest resolution

    def __post_init__(self):
        h = max(s.x.shape[1] for s in self.samples)
        w = max(s.x.shape[2] for s in self.samples)
        if self.labels.shape != (h, w):
            raise DataError(
                f"label map {self.labels.shape} must match the finest resolution ({h}, {w})"
            )


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[dict] = field(default_factory=list)  # {"path": str, "split": str}
    root: str = ""

    @property
    def k(self) -> int:
        return len(self.classes)

    def paths(self, split: str | None = None) -> list[str]:
        return [
            os.path.join(self.root, s["path"])
            for s in self.samples
            if split is None or s["split"] == split
        ]


# ---------------------------------------------------------------------------
# resampling


def bilinear_upsample(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Upsample (T, H, W, C) spatially with half-pixel-center alignment."""
    t_len, h_in, w_in, c = x.shape
    if h_out < h_in or w_out < w_in:
        raise ConfigError(
            f"downscaling not supported: ({h_in}, {w_in}) -> ({h_out}, {w_out})"
        )
    if (h_out, w_out) == (h_in, w_in):
        return x.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
        frac = src - lo
        return lo, frac

    ylo, yfrac = axis_coords(h_out, h_in)
    xlo, xfrac = axis_coords(w_out, w_in)
    yfrac = yfrac[:, None, None]
    xfrac = xfrac[None, :, None]

    out = np.empty((t_len, h_out, w_out, c), dtype=np.float64)
    xd = x.astype(np.float64)
    for ti in range(t_len):
        a = xd[ti][np.ix_(ylo, xlo)]
        b = xd[ti][np.ix_(ylo, xlo + 1)] if w_in > 1 else a
        cc = xd[ti][np.ix_(ylo + 1, xlo)] if h_in > 1 else a
        dd = xd[ti][np.ix_(ylo + 1, xlo + 1)] if min(h_in, w_in) > 1 else a
        top = a * (1 - xfrac) + b * xfrac
        bot = cc * (1 - xfrac) + dd * xfrac
        out[ti] = top * (1 - yfrac) + bot * yfrac
    return out.astype(x.dtype)


def temporal_align(dense: SITSSample, target_dates: list[int], max_gap: int = 5) -> SITSSample:
    """Pick the nearest frame per target date; ties go to the earlier date."""
    src = np.asarray(dense.dates, dtype=np.int64)
    picks = []
    for td in target_dates:
        dist = np.abs(src - td)
        i = int(dist.argmin())  # argmin returns the first (earlier) on ties
        if dist[i] > max_gap:
            raise DataError(
                f"no frame within {max_gap} days of target {td} "
                f"(nearest is {int(src[i])}, modality {dense.modality_id!r})"
            )
        picks.append(i)
    return SITSSample(dense.x[picks].copy(), list(target_dates), dense.modality_id)


def rbf_gapfill(
    irregular: SITSSample,
    target_dates: list[int],
    windows: tuple[int, ...] = (11, 23, 63, 127),
) -> SITSSample:
    """Gaussian filter-ensemble interpolation onto a target date grid.

    Per kernel, observations within +-window days are averaged with
    Gaussian weights (sigma = window / 2, renormalized); the output is the
    unweighted mean over kernels that saw at least one observation.
    """
    src = np.asarray(irregular.dates, dtype=np.float64)
    frames = irregular.x.astype(np.float64)
    out = np.empty((len(target_dates),) + irregular.x.shape[1:], dtype=np.float64)
    for k, td in enumerate(target_dates):
        delta = src - td
        estimates = []
        for w in windows:
            mask = np.abs(delta) <= w
            if not mask.any():
                continue
            sigma = w / 2.0
            weights = np.exp(-(delta[mask] ** 2) / (2.0 * sigma**2))
            weights = weights / weights.sum()
            estimates.append(np.tensordot(weights, frames[mask], axes=1))
        if not estimates:
            raise DataError(
                f"no observation within +-{windows[-1]} days of target date {td}"
            )
        out[k] = sum(estimates) / len(estimates)
    return SITSSample(out.astype(irregular.x.dtype), list(target_dates), irregular.modality_id)


def random_flip(cset: CoRegisteredSet, rng: np.random.Generator) -> CoRegisteredSet:
    """Flip all modalities and the label map together, H and W each with p=0.5."""
    flip_h = rng.random() < 0.5
    flip_w = rng.random() < 0.5
    samples = []
    for s in cset.samples:
        x = s.x
        if flip_h:
            x = x[:, ::-1]
        if flip_w:
            x = x[:, :, ::-1]
        samples.append(SITSSample(np.ascontiguousarray(x), list(s.dates), s.modality_id))
    labels = cset.labels
    if flip_h:
        labels = labels[::-1]
    if flip_w:
        labels = labels[:, ::-1]
    return CoRegisteredSet(samples, np.ascontiguousarray(labels))


# ---------------------------------------------------------------------------
# container I/O


def write_container(cset: CoRegisteredSet, path: str) -> None:
    """Serialize a co-registered set; atomic via temp file + rename."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<III", VERSION, len(cset.samples), 0)
    for s in cset.samples:
        mid = s.modality_id.encode("utf-8")
        if len(mid) > 255:
            raise DataError(f"modality id too long: {s.modality_id!r}")
        buf += struct.pack("<B", len(mid)) + mid
        t_len, h, w, c = s.x.shape
        buf += struct.pack("<IIII", t_len, h, w, c)
        buf += np.asarray(s.dates, dtype="<u2").tobytes()
        buf += np.ascontiguousarray(s.x, dtype="<f4").tobytes()
    h, w = cset.labels.shape
    buf += struct.pack("<II", h, w)
    buf += np.ascontiguousarray(cset.labels, dtype="<u2").tobytes()

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ParseError(f"truncated file: needed {n} bytes", offset=self.off)
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str) -> CoRegisteredSet:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, m, _k = r.unpack("<III")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    samples = []
    for _ in range(m):
        (id_len,) = r.unpack("<B")
        mid = r.take(id_len).decode("utf-8")
        t_len, h, w, c = r.unpack("<IIII")
        dates = np.frombuffer(r.take(2 * t_len), dtype="<u2").astype(np.int64)
        x = np.frombuffer(r.take(4 * t_len * h * w * c), dtype="<f4")
        x = x.reshape(t_len, h, w, c).copy()
        samples.append(SITSSample(x, [int(d) for d in dates], mid))
    h, w = r.unpack("<II")
    labels = np.frombuffer(r.take(2 * h * w), dtype="<u2").astype(np.int64).reshape(h, w)
    return CoRegisteredSet(samples, labels)


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    payload = {"classes": manifest.classes, "samples": manifest.samples}
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> DatasetManifest:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    manifest = DatasetManifest(
        classes=payload["classes"], samples=payload["samples"], root=os.path.dirname(path)
    )
    k = manifest.k
    for entry in manifest.samples:
        full = os.path.join(manifest.root, entry["path"])
        if not os.path.exists(full):
            raise DataError(f"manifest references missing file {full}")
    if k < 2:
        raise ConfigError("classification needs at least 2 classes")
    return manifest


# ---------------------------------------------------------------------------
# synthetic dataset


def _class_signatures(
    rng: np.random.Generator, k: int, channels: list[int], ambiguous: bool
) -> list[np.ndarray]:
    """Per-modality signature tables, shape (K, C_j, 3): offset, amplitude, phase.

    In ambiguous mode, modality j only sees its class-pair group: classes
    within a pair share a signature, with the pairing rotated between
    modalities so the combination of modalities separates all classes.
    """
    tables = []
    for j, c in enumerate(channels):
        base = rng.uniform(
            [-0.5, 0.5, 0.0], [0.5, 1.5, 2.0 * np.pi], size=(k, c, 3)
        )
        if ambiguous:
            group = (np.arange(k) + (j % 2)) % k // 2
            base = base[group * 2 % k]
        tables.append(base)
    return tables


def _render_modality(
    rng: np.random.Generator,
    labels: np.ndarray,
    sig: np.ndarray,
    dates: np.ndarray,
    shape: tuple[int, int],
    noise: float,
) -> np.ndarray:
    """Evaluate class signatures at modality resolution; labels sampled nearest."""
    h, w = shape
    hl, wl = labels.shape
    yy = (np.arange(h) * hl) // h
    xx = (np.arange(w) * wl) // w
    local = labels[np.ix_(yy, xx)]  # (h, w)
    t_len, c = len(dates), sig.shape[1]
    # offset + amplitude * sin(2 pi doy/366 + phase), per channel
    off = sig[local][..., 0]  # (h, w, C)
    amp = sig[local][..., 1]
    pha = sig[local][..., 2]
    doy = dates[:, None, None, None] / 366.0
    x = off[None] + amp[None] * np.sin(2.0 * np.pi * doy + pha[None])
    x = x + rng.normal(0.0, noise, size=(t_len, h, w, c))
    return x.astype(np.float32)


def gen_synthetic_dataset(
    out_dir: str,
    seed: int = 0,
    n_samples: int = 16,
    m: int = 2,
    k: int = 4,
    shapes: list[tuple[int, int]] | None = None,
    channels: list[int] | None = None,
    n_timesteps: int = 12,
    noise: float = 0.05,
    ambiguous: bool = False,
    n_rects: int = 3,
    splits: tuple[float, float] = (0.75, 0.125),
) -> str:
    """Generate a seeded dataset of containers plus manifest; returns manifest path.

    Modalities get distinct resolutions and date grids: all share a 10-day
    target grid, and the last modality is additionally sampled on a 5-day
    grid to exercise temporal alignment. Class 0 is the background.
    """
    if k < 2:
        raise ConfigError("classification needs at least 2 classes")
    if n_samples < 1 or m < 1 or n_timesteps < 1:
        raise ConfigError("n_samples, modalities and n_timesteps must be >= 1")
    if ambiguous and (k < 4 or k % 2 != 0):
        raise ConfigError("ambiguous signatures require an even class count >= 4")
    shapes = shapes or ([(8, 8)] * max(m - 1, 1) + [(24, 24)])[:m]
    channels = channels or ([2, 4, 3] * ((m + 2) // 3))[:m]
    if len(shapes) != m or len(channels) != m:
        raise ConfigError("shapes and channels must list one entry per modality")

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    sig = _class_signatures(rng, k, channels, ambiguous)
    target_dates = np.asarray([5 + 10 * i for i in range(n_timesteps)], dtype=np.int64)
    if target_dates[-1] > 366:
        raise ConfigError(f"{n_timesteps} ten-day steps exceed a year")
    dense_dates = np.arange(5, target_dates[-1] + 1, 5, dtype=np.int64)

    hl = max(s[0] for s in shapes)
    wl = max(s[1] for s in shapes)
    n_train = int(round(n_samples * splits[0]))
    n_val = int(round(n_samples * splits[1]))

    entries = []
    for idx in range(n_samples):
        labels = np.zeros((hl, wl), dtype=np.int64)
        for _ in range(n_rects):
            cls = int(rng.integers(1, k))
            y0 = int(rng.integers(0, hl))
            x0 = int(rng.integers(0, wl))
            y1 = min(hl, y0 + int(rng.integers(2, max(3, hl // 2 + 1))))
            x1 = min(wl, x0 + int(rng.integers(2, max(3, wl // 2 + 1))))
            labels[y0:y1, x0:x1] = cls
        samples = []
        for j in range(m):
            dates = dense_dates if j == m - 1 and m > 1 else target_dates
            x = _render_modality(rng, labels, sig[j], dates, shapes[j], noise)
            samples.append(SITSSample(x, [int(d) for d in dates], f"mod{j}"))
        cset = CoRegisteredSet(samples, labels)
        fname = f"sample_{idx:04d}.msit"
        write_container(cset, os.path.join(out_dir, fname))
        split = "train" if idx < n_train else ("val" if idx < n_train + n_val else "test")
        entries.append({"path": fname, "split": split})

    manifest = DatasetManifest(
        classes=[f"class_{i}" for i in range(k)], samples=entries, root=out_dir
    )
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# model-facing preparation


def prepare_set(
    cset: CoRegisteredSet, modalities: list[int] | None = None, max_gap: int = 5
) -> CoRegisteredSet:
    """Resample the chosen modalities to a common grid for fusion.

    Spatial: bilinear upsampling to the label resolution. Temporal: align
    every modality to the date grid of the sparsest one (nearest frame).
    """
    chosen = cset.samples if modalities is None else [cset.samples[i] for i in modalities]
    h, w = cset.labels.shape
    target_dates = min((s.dates for s in chosen), key=len)
    out = []
    for s in chosen:
        aligned = s if list(s.dates) == list(target_dates) else temporal_align(s, target_dates, max_gap)
        x = bilinear_upsample(aligned.x, h, w)
        out.append(SITSSample(x, list(aligned.dates), s.modality_id))
    return CoRegisteredSet(out, cset.labels)
