"""Synthetic confounded silhouette sequences, PGM silhouette I/O, and the
attention-confounder overlap metric.

Each synthetic frame holds a walking blob whose outline radius oscillates with a
class-specific angular frequency (the causal signal, confined to a central box)
and a static bright square in one of K border slots (the confounder). The slot
matches the class with probability ``train_corr`` / ``test_corr``; otherwise it
is drawn uniformly from the remaining slots, so a correlation of 1/K makes the
marker independent of the label.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, RegionOverlapError, ShapeError
from .tensor_core import make_rng

log = logging.getLogger(__name__)

TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    train_per_class: int = 8
    test_per_class: int = 8
    frames: int = 8
    height: int = 32
    width: int = 24
    marker_size: int = 3
    train_corr: float = 0.95
    test_corr: float | None = None  # None -> 1/num_classes
    signal_amp: float = 0.25
    radius: float = 0.36  # blob radius as a fraction of the signal box height
    jitter: int = 1  # max per-sequence centre offset in pixels
    noise: float = 0.0  # per-pixel flip probability inside the signal box
    signal_box: tuple | None = None  # (top, left, bottom, right), exclusive bottom/right
    seed: int = 0

    @property
    def rho_test(self) -> float:
        return 1.0 / self.num_classes if self.test_corr is None else self.test_corr

    def validate(self):
        if self.num_classes < 2:
            raise DatasetError(f"DatasetSpec: need num_classes >= 2, got {self.num_classes}")
        if self.frames < 2:
            raise DatasetError(f"DatasetSpec: need frames >= 2, got {self.frames}")
        for name, rho in (("train_corr", self.train_corr), ("test_corr", self.rho_test)):
            if not 0.0 <= rho <= 1.0:
                raise DatasetError(f"DatasetSpec: {name}={rho} outside [0, 1]")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise DatasetError("DatasetSpec: per-class sequence counts must be positive")


@dataclass
class SampleRecord:
    sequence: np.ndarray  # [T,1,H,W] in [0,1]
    label: object
    confounder_mask: np.ndarray  # [H,W] in {0,1}
    split: str
    marker: int = -1
    name: str = ""

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.sequence).tobytes()).hexdigest()


@dataclass(frozen=True)
class Layout:
    """Pixel regions of a synthetic frame."""

    signal: tuple  # (top, left, bottom, right)
    slots: tuple  # ((top, left), ...) marker corner per class slot
    size: int
    shape: tuple = field(default=(0, 0))

    def signal_mask(self):
        m = np.zeros(self.shape)
        t, l, b, r = self.signal
        m[t:b, l:r] = 1.0
        return m

    def slot_mask(self, j):
        m = np.zeros(self.shape)
        t, l = self.slots[j]
        m[t:t + self.size, l:l + self.size] = 1.0
        return m

    def marker_region(self):
        return np.clip(sum(self.slot_mask(j) for j in range(len(self.slots))), 0, 1)


def layout(spec: DatasetSpec) -> Layout:
    """Marker slots along the top and bottom border bands; signal box in between.

    With four classes the slots are the four corners. Raises RegionOverlapError
    naming the colliding regions.
    """
    H, W, ms, K = spec.height, spec.width, spec.marker_size, spec.num_classes
    n_top = math.ceil(K / 2)
    slots = []
    for band, n in ((1, n_top), (H - 1 - ms, K - n_top)):
        if n == 0:
            continue
        xs = [(W - ms) // 2] if n == 1 else np.round(np.linspace(1, W - 1 - ms, n)).astype(int).tolist()
        slots.extend((band, int(x)) for x in xs)
    box = spec.signal_box or (ms + 2, 1, H - ms - 2, W - 1)
    lay = Layout(signal=tuple(int(v) for v in box), slots=tuple(slots), size=ms, shape=(H, W))
    t, l, b, r = lay.signal
    if b - t < 4 or r - l < 4:
        raise RegionOverlapError(f"signal region {lay.signal} is too small for frames {H}x{W}")
    masks = [lay.slot_mask(j) for j in range(K)]
    for j, m in enumerate(masks):
        if m.sum() != ms * ms:
            raise RegionOverlapError(f"marker[{j}] at {slots[j]} does not fit inside the {H}x{W} frame")
        for i in range(j):
            if np.any(m * masks[i]):
                raise RegionOverlapError(f"regions overlap: marker[{i}] and marker[{j}]")
        if np.any(m * lay.signal_mask()):
            raise RegionOverlapError(f"regions overlap: signal {lay.signal} and marker[{j}] at {slots[j]}")
    return lay


def _frequency(label: int) -> int:
    return label + 2


def _blob_frames(spec: DatasetSpec, lay: Layout, label: int, rng) -> np.ndarray:
    t, l, b, r = lay.signal
    bh, bw = b - t, r - l
    cy = t + bh / 2 + rng.integers(-spec.jitter, spec.jitter + 1)
    cx = l + bw / 2 + rng.integers(-spec.jitter, spec.jitter + 1)
    R = spec.radius * bh * rng.uniform(0.9, 1.1)
    aspect = min(1.0, 0.8 * bw / bh)
    phase = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.6, 1.0) * 2 * np.pi / spec.frames
    f = _frequency(label)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    box = lay.signal_mask()
    out = np.zeros((spec.frames, spec.height, spec.width))
    for k in range(spec.frames):
        bob = 0.5 * np.sin(2 * speed * k)
        dy = (yy + 0.5 - cy - bob) / R
        dx = (xx + 0.5 - cx) / (R * aspect)
        rho = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        rim = 1.0 + spec.signal_amp * np.sin(f * theta + phase + speed * k)
        frame = (rho <= rim).astype(np.float64) * box
        if spec.noise > 0:
            flips = (rng.random(frame.shape) < spec.noise) * box
            frame = np.abs(frame - flips)
        out[k] = frame
    return out


def _marker_slot(label, K, rho, rng):
    if rng.random() < rho:
        return label
    others = [j for j in range(K) if j != label]
    return int(others[rng.integers(len(others))])


def generate(spec: DatasetSpec) -> list:
    """All train and test records for ``spec``; reproducible from ``spec.seed``.

    Records are grouped by split, then class, then sequence index.
    """
    spec.validate()
    lay = layout(spec)
    records = []
    for split_id, (split, per_class, rho) in enumerate(
        ((TRAIN, spec.train_per_class, spec.train_corr), (TEST, spec.test_per_class, spec.rho_test))
    ):
        for c in range(spec.num_classes):
            for i in range(per_class):
                rng = make_rng(spec.seed, split_id, c, i)
                frames = _blob_frames(spec, lay, c, rng)
                slot = _marker_slot(c, spec.num_classes, rho, rng)
                mask = lay.slot_mask(slot)
                seq = np.maximum(frames, mask[None])[:, None]
                records.append(SampleRecord(seq, c, mask, split, slot, f"{split}-{c:03d}-{i:02d}"))
    return records


def split(records, which):
    return [r for r in records if r.split == which]


def gallery_probe(records):
    """First sequence of each identity forms the gallery; the rest are probes."""
    seen, gallery, probe = set(), [], []
    for r in records:
        if r.label in seen:
            probe.append(r)
        else:
            seen.add(r.label)
            gallery.append(r)
    return gallery, probe


def marker_rule_accuracy(records, spec: DatasetSpec) -> float:
    """Accuracy of predicting the class as the slot nearest the brightest border patch."""
    lay = layout(spec)
    masks = np.stack([lay.slot_mask(j) for j in range(spec.num_classes)])
    hits = 0
    for r in records:
        frame = r.sequence[0, 0]
        score = (masks * frame[None]).sum(axis=(1, 2))
        hits += int(np.argmax(score) == r.label)
    return hits / len(records)


# ---------------------------------------------------------------- overlap metric


def upsample_nearest(maps, H, W):
    h, w = maps.shape[-2:]
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return maps[..., rows[:, None], cols[None, :]]


def confounder_overlap(att, mask) -> float:
    """Mean over maps of the attention mass share falling inside ``mask``."""
    maps = np.asarray(getattr(att, "maps", att), dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if maps.ndim != 3 or mask.ndim != 2:
        raise ShapeError(f"confounder_overlap: expected maps [M,h,w] and mask [H,W], got {maps.shape}, {mask.shape}")
    if maps.shape[1] > mask.shape[0] or maps.shape[2] > mask.shape[1]:
        raise ShapeError(f"confounder_overlap: maps {maps.shape[1:]} larger than mask {mask.shape}")
    up = upsample_nearest(maps, *mask.shape)
    total = up.sum(axis=(1, 2))
    if np.any(total <= 0):
        raise ValueError("confounder_overlap: an attention map has zero total mass")
    return float(np.mean((up * mask[None]).sum(axis=(1, 2)) / total))


# ---------------------------------------------------------------- PGM I/O


def write_pgm(path, img):
    """8-bit binary PGM (P5). ``img`` is uint8 or floats in [0,1]."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _tokens(data: bytes, count: int):
    i, out = 0, []
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated header")
        out.append(data[i:j])
        i = j
    return out, i + 1


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 PGM into a uint8 [H,W] array."""
    try:
        data = Path(path).read_bytes()
        (magic, w, h, maxval), off = _tokens(data, 4)
        if magic != b"P5":
            raise ValueError(f"unsupported magic {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval != 255:
            raise ValueError(f"expected 8-bit maxval 255, got {maxval}")
        pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read PGM frame {path}: {exc}") from exc
    return pix.reshape(h, w).copy()


def _label_of(name: str):
    return int(name) if name.isdigit() else name


def frame_files(view):
    return sorted(f for f in Path(view).iterdir() if f.suffix == ".pgm" and not f.name.endswith(".mask.pgm"))


def load_sequence_dir(view) -> np.ndarray:
    """One sequence [T,1,H,W] from a directory of PGM frames, thresholded at 128."""
    view = Path(view)
    if not view.is_dir():
        raise DatasetError(f"sequence directory {view} does not exist")
    frames = []
    for f in frame_files(view):
        img = read_pgm(f)
        if frames and img.shape != frames[0].shape:
            raise DatasetError(
                f"frame {f} has size {img.shape[0]}x{img.shape[1]}, "
                f"expected {frames[0].shape[0]}x{frames[0].shape[1]} like the rest of {view}"
            )
        frames.append(img)
    if not frames:
        raise DatasetError(f"no PGM frames in {view}")
    return (np.stack(frames) >= 128).astype(np.float64)[:, None]


def load_silhouette_dir(path, min_frames: int = 1, split: str = TEST) -> list:
    """Load ``<id>/<condition>/<view>/<frame>.pgm`` sequences thresholded at 128.

    Frames are sorted lexicographically. Sequences shorter than ``min_frames`` are
    skipped with a warning. A ``<view>.mask.pgm`` file beside a view directory
    supplies its confounder mask; without one the mask is all zeros (unknown).
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"silhouette directory {root} does not exist")
    records = []
    for id_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for cond in sorted(p for p in id_dir.iterdir() if p.is_dir()):
            for view in sorted(p for p in cond.iterdir() if p.is_dir()):
                files = frame_files(view)
                if len(files) < min_frames:
                    log.warning("skipping %s: %d frames < minimum %d", view, len(files), min_frames)
                    continue
                seq = load_sequence_dir(view)
                mask_file = view.parent / f"{view.name}.mask.pgm"
                if mask_file.exists():
                    mask = (read_pgm(mask_file) >= 128).astype(np.float64)
                else:
                    mask = np.zeros(seq.shape[2:])
                records.append(
                    SampleRecord(seq, _label_of(id_dir.name), mask, split, name=f"{id_dir.name}/{cond.name}/{view.name}")
                )
    if not records:
        raise DatasetError(f"no sequences found under {root}")
    return records


def write_records(records, root, split_name=None):
    """Write records in the loader layout; returns manifest rows (path, label, split, frames)."""
    root = Path(root)
    rows = []
    counters = {}
    for r in records:
        ident = f"{r.label:03d}" if isinstance(r.label, (int, np.integer)) else str(r.label)
        n = counters.get(ident, 0)
        counters[ident] = n + 1
        view = root / ident / f"seq{n:02d}" / "000"
        os.makedirs(view, exist_ok=True)
        for t, frame in enumerate(r.sequence[:, 0]):
            write_pgm(view / f"{t:03d}.pgm", frame)
        if np.any(r.confounder_mask):
            write_pgm(view.parent / "000.mask.pgm", r.confounder_mask)
        rows.append((str(view), r.label, split_name or r.split, r.sequence.shape[0]))
    return rows


def write_dataset(records, out_dir):
    """``train/``, ``gallery/`` and ``probe/`` trees plus ``manifest.txt`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = split(records, TRAIN)
    gallery, probe = gallery_probe(split(records, TEST))
    rows = []
    rows += write_records(train, out / "train", TRAIN)
    rows += write_records(gallery, out / "gallery", TEST)
    rows += write_records(probe, out / "probe", TEST)
    with open(out / "manifest.txt", "w") as fh:
        fh.write("# path\tlabel\tsplit\tframes\n")
        for p, label, s, n in rows:
            fh.write(f"{os.path.relpath(p, out)}\t{label}\t{s}\t{n}\n")
    return rows
