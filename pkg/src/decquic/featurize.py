"""Turn traces into labeled two-channel window images.

A trace is cut into sliding windows of length T (stride T*(1-overlap),
anchored at t=0).  Within a window, packets are counted on an M x N grid:
time bin i covers [i*dt, (i+1)*dt) relative to the window start with
dt = T/M, and length bin j = min(floor(len/dl), N-1) with dl = L/N
(lengths above L are clamped into the top bin rather than dropped).
Server-to-client packets fill the red channel, client-to-server the green
one; blue is unused.  Each channel is min-max normalized over its own
M x N counts within the window and quantized to 8 bits, so a nonempty
channel always reaches 255 and an empty window is all zeros.  The label is
the number of response events starting in [start, start+T).
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .trace import Trace, load_trace, read_manifest

K_CLASSES = 21  # response counts 0..20; larger labels are excluded at assembly time


@dataclass(frozen=True)
class WindowSpec:
    """Windowing and binning parameters (presets: T=0.1 or 0.3 seconds)."""

    window_s: float = 0.3
    overlap: float = 0.9
    time_bins: int = 32  # M
    length_bins: int = 32  # N
    max_len: int = 1500  # L, bytes

    def __post_init__(self) -> None:
        if not (self.window_s > 0):
            raise ConfigError(f"window_s must be > 0, got {self.window_s}")
        if not (0.0 <= self.overlap < 1.0):
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.time_bins < 1 or self.length_bins < 1:
            raise ConfigError("time_bins and length_bins must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @property
    def dt_s(self) -> float:
        return self.window_s / self.time_bins

    @property
    def dl_bytes(self) -> float:
        return self.max_len / self.length_bins

    @property
    def stride_s(self) -> float:
        return self.window_s * (1.0 - self.overlap)


@dataclass
class WindowImage:
    """Two M x N 8-bit channels plus the window's label and metadata.

    Grids are indexed [time_bin, length_bin]; red holds server-to-client
    counts, green client-to-server.  The blue plane is implicitly zero.
    """

    red: np.ndarray
    green: np.ndarray
    label: int
    trace_id: str
    server_id: str
    window_index: int
    window_start_s: float


@dataclass(frozen=True)
class AugmentSpec:
    """Gaussian pixel noise for minority-class images (labels 10..20)."""

    noise_std: float = 2.55  # 1% of the 8-bit range
    class_lo: int = 10
    class_hi: int = 20

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.class_lo > self.class_hi:
            raise ConfigError("class_lo must be <= class_hi")


def window_starts(trace_duration_s: float, spec: WindowSpec) -> list[float]:
    """Start times 0, s, 2s, ... while start < duration; duration 0 gives [0.0].

    A start within 1e-9 (relative) of the duration is treated as equal and
    excluded, so exact tilings like duration 0.9 / T 0.3 yield 3 windows
    despite floating-point stride arithmetic.
    """
    if trace_duration_s <= 0.0:
        return [0.0]
    stride = spec.stride_s
    limit = trace_duration_s * (1.0 - 1e-9)
    starts: list[float] = []
    k = 0
    while True:
        start = k * stride
        if start >= limit:
            break
        starts.append(start)
        k += 1
    return starts


def bin_window(trace: Trace, start_s: float, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Count packets into (red, green) M x N integer grids for one window.

    Time bin membership follows i*dt <= (t - start) < (i+1)*dt exactly
    (the floor index is corrected at floating-point boundaries so the
    inequality, not the division, decides).  Packets outside the window are
    ignored.
    """
    M, N = spec.time_bins, spec.length_bins
    red = np.zeros((M, N), dtype=np.int64)
    green = np.zeros((M, N), dtype=np.int64)
    if not trace.packets:
        return red, green

    t = np.array([p.t for p in trace.packets], dtype=np.float64)
    length = np.array([p.len for p in trace.packets], dtype=np.int64)
    is_s2c = np.array([p.dir == "s2c" for p in trace.packets], dtype=bool)

    dt = spec.dt_s
    rel = t - start_s
    ti = np.floor(rel / dt).astype(np.int64)
    # enforce the half-open interval at representation boundaries
    ti[rel < ti * dt] -= 1
    ti[rel >= (ti + 1) * dt] += 1
    in_window = (ti >= 0) & (ti < M)

    dl = spec.dl_bytes
    lj = np.minimum(np.floor(length / dl).astype(np.int64), N - 1)

    for grid, mask in ((red, in_window & is_s2c), (green, in_window & ~is_s2c)):
        np.add.at(grid, (ti[mask], lj[mask]), 1)
    return red, green


def normalize_channel(counts: np.ndarray) -> np.ndarray:
    """Min-max normalize one channel's counts to 8-bit values.

    x_min/x_max are taken over all M x N bins (zero-count bins included).
    Values are round(255 * (x - x_min) / (x_max - x_min)) with
    round-half-away-from-zero.  An all-zero channel stays all zero; a
    degenerate channel (x_max == x_min > 0) maps every occupied bin to 255.
    """
    counts = np.asarray(counts)
    x_min = int(counts.min())
    x_max = int(counts.max())
    if x_max == 0:
        return np.zeros(counts.shape, dtype=np.uint8)
    if x_max == x_min:
        return np.where(counts > 0, 255, 0).astype(np.uint8)
    scaled = 255.0 * (counts - x_min) / (x_max - x_min)
    return np.floor(scaled + 0.5).astype(np.uint8)


def label_window(events, start_s: float, window_s: float) -> int:
    """Number of response events with start_s <= t < start_s + window_s."""
    end = start_s + window_s
    return sum(1 for e in events if start_s <= e.t < end)


def featurize_trace(trace: Trace, spec: WindowSpec) -> list[WindowImage]:
    """One WindowImage per window start (bin + normalize + label)."""
    images: list[WindowImage] = []
    for idx, start in enumerate(window_starts(trace.duration_s, spec)):
        red_counts, green_counts = bin_window(trace, start, spec)
        images.append(
            WindowImage(
                red=normalize_channel(red_counts),
                green=normalize_channel(green_counts),
                label=label_window(trace.events, start, spec.window_s),
                trace_id=trace.trace_id,
                server_id=trace.server_id,
                window_index=idx,
                window_start_s=start,
            )
        )
    return images


def augment(image: WindowImage, aug: AugmentSpec, rng: np.random.Generator) -> WindowImage:
    """Add Gaussian pixel noise to minority-class images; identity otherwise.

    Noise (std = aug.noise_std) is added per pixel to each channel that has
    any traffic, then rounded and clamped to [0, 255].  All-zero channels
    stay zero and the label/metadata are unchanged.
    """
    if not (aug.class_lo <= image.label <= aug.class_hi):
        return image

    def noisy(grid: np.ndarray) -> np.ndarray:
        if not grid.any():
            return grid
        noise = rng.normal(0.0, aug.noise_std, size=grid.shape)
        out = np.floor(grid.astype(np.float64) + noise + 0.5)
        return np.clip(out, 0, 255).astype(np.uint8)

    return replace(image, red=noisy(image.red), green=noisy(image.green))


# ---------------------------------------------------------------------------
# PNG + manifest dataset format
# ---------------------------------------------------------------------------

IMAGE_MANIFEST_COLUMNS = (
    "image_path",
    "label",
    "trace_id",
    "window_index",
    "window_start_s",
    "server_id",
)


def to_rgb_array(image: WindowImage) -> np.ndarray:
    """(N, M, 3) uint8 array: rows are length bins, columns time bins, B=0."""
    rgb = np.zeros((image.red.shape[1], image.red.shape[0], 3), dtype=np.uint8)
    rgb[:, :, 0] = image.red.T
    rgb[:, :, 1] = image.green.T
    return rgb


def from_rgb_array(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of to_rgb_array: (red, green) grids indexed [time, length]."""
    return rgb[:, :, 0].T.copy(), rgb[:, :, 1].T.copy()


def export_dataset(
    images: list[WindowImage],
    out_dir: Path | str,
    *,
    max_label: int | None = K_CLASSES - 1,
    manifest_name: str = "images.csv",
) -> Path:
    """Write images as PNGs plus a manifest CSV; returns the manifest path.

    Images with label > max_label are excluded (not clamped).  Filenames are
    {trace_id}_{window_index}.png, so concurrent writers for distinct traces
    never collide; the manifest itself is written by a single writer.
    """
    if not images:
        raise ConfigError("export_dataset: empty image list")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = out_dir / manifest_name
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(IMAGE_MANIFEST_COLUMNS)
        for img in images:
            if max_label is not None and img.label > max_label:
                continue
            rel = f"images/{img.trace_id}_{img.window_index}.png"
            Image.fromarray(to_rgb_array(img), mode="RGB").save(out_dir / rel)
            writer.writerow(
                [
                    rel,
                    img.label,
                    img.trace_id,
                    img.window_index,
                    f"{img.window_start_s:.9f}",
                    img.server_id,
                ]
            )
    return manifest_path


def load_image(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """Load one exported PNG back into (red, green) grids."""
    rgb = np.asarray(Image.open(path).convert("RGB"))
    return from_rgb_array(rgb)


@dataclass
class ImageDataset:
    """In-memory image dataset: stacked channel grids plus per-image metadata."""

    images: np.ndarray  # (B, 2, M, N) uint8, channel 0 red / 1 green
    labels: np.ndarray  # (B,) int64
    trace_ids: list[str]
    server_ids: list[str]
    window_indices: np.ndarray
    window_starts: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            trace_ids=[self.trace_ids[i] for i in idx],
            server_ids=[self.server_ids[i] for i in idx],
            window_indices=self.window_indices[idx],
            window_starts=self.window_starts[idx],
        )


def read_image_manifest(manifest_path: Path | str) -> list[dict]:
    with open(manifest_path, newline="") as f:
        return list(csv.DictReader(f))


def load_image_dataset(manifest_path: Path | str, rows: list[dict] | None = None) -> ImageDataset:
    """Load images referenced by a manifest (or a filtered subset of its rows)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    if rows is None:
        rows = read_image_manifest(manifest_path)
    if not rows:
        raise ConfigError(f"image manifest {manifest_path} has no rows to load")
    stack = []
    labels = []
    trace_ids: list[str] = []
    server_ids: list[str] = []
    window_indices = []
    starts = []
    for rec in rows:
        red, green = load_image(base / rec["image_path"])
        stack.append(np.stack([red, green]))
        labels.append(int(rec["label"]))
        trace_ids.append(rec["trace_id"])
        server_ids.append(rec["server_id"])
        window_indices.append(int(rec["window_index"]))
        starts.append(float(rec["window_start_s"]))
    imgs = np.stack(stack)
    return ImageDataset(
        images=imgs,
        labels=np.array(labels, dtype=np.int64),
        trace_ids=trace_ids,
        server_ids=server_ids,
        window_indices=np.array(window_indices, dtype=np.int64),
        window_starts=np.array(starts, dtype=np.float64),
    )


def _featurize_one(args) -> list[list]:
    (row, base_dir, out_dir, spec, aug, seed, index, max_label) = args
    # local import avoids a module cycle (synth already depends on trace)
    from .synth import stream_rng

    trace = load_trace(row, base_dir)
    images = featurize_trace(trace, spec)
    if aug is not None:
        rng = stream_rng(seed, 2_000_000 + index)
        images = [augment(im, aug, rng) for im in images]
    rows = []
    for img in images:
        if max_label is not None and img.label > max_label:
            continue
        rel = f"images/{img.trace_id}_{img.window_index}.png"
        Image.fromarray(to_rgb_array(img), mode="RGB").save(Path(out_dir) / rel)
        rows.append(
            [rel, img.label, img.trace_id, img.window_index, f"{img.window_start_s:.9f}", img.server_id]
        )
    return rows


def featurize_dataset(
    trace_manifest: Path | str,
    out_dir: Path | str,
    spec: WindowSpec,
    aug: AugmentSpec | None = None,
    seed: int = 0,
    max_label: int | None = K_CLASSES - 1,
    workers: int = 1,
) -> Path:
    """Featurize every trace in a trace manifest into a PNG image dataset.

    Traces are processed independently (optionally in a worker pool; output
    bytes do not depend on worker count) and the image manifest is written by
    a single writer in trace order.  Returns the image manifest path.
    """
    trace_manifest = Path(trace_manifest)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    base_dir = trace_manifest.parent
    tasks = [
        (row, base_dir, out_dir, spec, aug, seed, i, max_label)
        for i, row in enumerate(read_manifest(trace_manifest))
    ]
    if not tasks:
        raise ConfigError(f"trace manifest {trace_manifest} is empty")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trace = list(pool.map(_featurize_one, tasks, chunksize=8))
    else:
        per_trace = [_featurize_one(t) for t in tasks]

    manifest_path = out_dir / "images.csv"
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(IMAGE_MANIFEST_COLUMNS)
        for rows in per_trace:
            writer.writerows(rows)
    return manifest_path


def images_from_dataset(images: list[WindowImage]) -> ImageDataset:
    """Build an ImageDataset directly from in-memory WindowImages."""
    if not images:
        raise ConfigError("images_from_dataset: empty image list")
    return ImageDataset(
        images=np.stack([np.stack([im.red, im.green]) for im in images]),
        labels=np.array([im.label for im in images], dtype=np.int64),
        trace_ids=[im.trace_id for im in images],
        server_ids=[im.server_id for im in images],
        window_indices=np.array([im.window_index for im in images], dtype=np.int64),
        window_starts=np.array([im.window_start_s for im in images], dtype=np.float64),
    )
