"""Datasets: the synthetic part-composition generator and plain-text image folders.

Folder layout is ``<root>/<split>/<class_name>/<file>.pgm|.ppm`` with splits
``known_train``, ``known_heldout`` and ``novel``. Pixels are stored as 8-bit
P2 (gray) / P3 (color) text; values are quantized to k/255 on export, and
the generator emits already-quantized values so export/load is lossless.
"""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np

SPLITS = ("known_train", "known_heldout", "novel")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int
    class_names: list
    split: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.split}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"{self.split}: label out of range for {len(self.class_names)} classes")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return len(self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class DataSplits:
    known_train: Dataset
    known_heldout: Dataset
    novel: Dataset
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.known_train.class_names) | set(self.known_heldout.class_names)
        clash = known & set(self.novel.class_names)
        if clash:
            raise DataError(f"classes in both known and novel splits: {sorted(clash)}")
        if self.known_heldout.class_names and self.known_heldout.class_names != self.known_train.class_names:
            raise DataError("known_heldout classes differ from known_train classes")

    def __iter__(self):
        return iter((self.known_train, self.known_heldout, self.novel))


# -- synthetic generator -------------------------------------------------------

@dataclass
class SynthSpec:
    n_parts: int = 12
    parts_per_class: int = 3
    n_known: int = 20
    n_novel: int = 10
    images_per_class: int = 50
    image_size: int = 32
    noise_std: float = 0.2
    jitter: int = 3  # max position offset in pixels
    intensity_jitter: float = 0.3  # part intensity drawn from [1 - j, 1]
    heldout_per_class: int = 10
    clutter: int = 8  # random distractor strokes per image
    clutter_intensity: float = 0.6
    seed: int = 0

    def validate(self):
        if self.parts_per_class < 1 or self.n_parts < self.parts_per_class:
            raise DataError(f"need n_parts >= parts_per_class >= 1, got {self.n_parts}, {self.parts_per_class}")
        if self.n_parts > len(PART_NAMES):
            raise DataError(f"n_parts must be <= {len(PART_NAMES)}, got {self.n_parts}")
        if self.image_size < 16 or self.image_size % 4:
            raise DataError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        if self.n_known < 1:
            raise DataError("n_known must be >= 1")
        if self.n_novel < 0:
            raise DataError("n_novel must be >= 0")
        if not 0 <= self.heldout_per_class < self.images_per_class:
            raise DataError(f"heldout_per_class must be in [0, images_per_class), got {self.heldout_per_class}")
        if self.noise_std < 0 or self.jitter < 0 or not 0 <= self.intensity_jitter <= 1:
            raise DataError("noise_std, jitter must be >= 0 and intensity_jitter in [0, 1]")
        if self.clutter < 0 or not 0 <= self.clutter_intensity <= 1:
            raise DataError("clutter must be >= 0 and clutter_intensity in [0, 1]")


PART_NAMES = ("hbar", "vbar", "diag_down", "diag_up", "arc_top", "arc_bottom",
              "corner_tl", "corner_br", "blob", "ring", "plus", "cross",
              "corner_tr", "corner_bl", "arc_left", "arc_right")


def _part_template(name, s=8):
    """s x s float template in [0, 1]."""
    t = np.zeros((s, s))
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2
    r = np.hypot(yy - c, xx - c)
    if name == "hbar":
        t[s // 2 - 1:s // 2 + 1, 1:s - 1] = 1
    elif name == "vbar":
        t[1:s - 1, s // 2 - 1:s // 2 + 1] = 1
    elif name == "diag_down":
        t[np.abs(yy - xx) <= 0.5] = 1
    elif name == "diag_up":
        t[np.abs(yy + xx - (s - 1)) <= 0.5] = 1
    elif name == "arc_top":
        t[(np.abs(r - c) < 0.9) & (yy <= c)] = 1
    elif name == "arc_bottom":
        t[(np.abs(r - c) < 0.9) & (yy >= c)] = 1
    elif name == "arc_left":
        t[(np.abs(r - c) < 0.9) & (xx <= c)] = 1
    elif name == "arc_right":
        t[(np.abs(r - c) < 0.9) & (xx >= c)] = 1
    elif name == "corner_tl":
        t[1:3, 1:s - 1] = 1
        t[1:s - 1, 1:3] = 1
    elif name == "corner_br":
        t[s - 3:s - 1, 1:s - 1] = 1
        t[1:s - 1, s - 3:s - 1] = 1
    elif name == "corner_tr":
        t[1:3, 1:s - 1] = 1
        t[1:s - 1, s - 3:s - 1] = 1
    elif name == "corner_bl":
        t[s - 3:s - 1, 1:s - 1] = 1
        t[1:s - 1, 1:3] = 1
    elif name == "blob":
        t[r <= c * 0.75] = 1
    elif name == "ring":
        t[np.abs(r - c * 0.7) < 0.8] = 1
    elif name == "plus":
        t[s // 2 - 1:s // 2 + 1, :] = 1
        t[:, s // 2 - 1:s // 2 + 1] = 1
    elif name == "cross":
        t[(np.abs(yy - xx) <= 0.5) | (np.abs(yy + xx - (s - 1)) <= 0.5)] = 1
    else:
        raise KeyError(name)
    return t


def part_cell(p, grid=4):
    """Nominal (row, col) cell of part p on a grid x grid layout.

    Parts are spread round-robin over the four quadrants so every
    quadrant hosts a similar number of them.
    """
    half = grid // 2
    q, slot = p % 4, (p // 4) % (half * half)
    qr, qc = divmod(q, 2)
    sr, sc = divmod(slot, half)
    return qr * half + sr, qc * half + sc


def _choose_classes(spec: SynthSpec, rng):
    combos = list(itertools.combinations(range(spec.n_parts), spec.parts_per_class))
    if spec.n_known + spec.n_novel > len(combos):
        raise DataError(f"n_known + n_novel = {spec.n_known + spec.n_novel} exceeds the "
                        f"{len(combos)} distinct part combinations")
    order = rng.permutation(len(combos))
    known = [combos[i] for i in order[:spec.n_known]]
    seen = set(itertools.chain.from_iterable(known))
    novel = [combos[i] for i in order[spec.n_known:] if set(combos[i]) <= seen][:spec.n_novel]
    if len(novel) < spec.n_novel:
        raise DataError(f"only {len(novel)} novel combinations use seen parts; need {spec.n_novel}")
    return known, novel


def render(parts, spec: SynthSpec, rng):
    """One grayscale image (S, S, 1) showing the given parts."""
    s = spec.image_size
    cell = s // 4
    img = np.zeros((s + 2 * cell, s + 2 * cell))  # margin absorbs jitter
    for p in parts:
        t = _part_template(PART_NAMES[p], cell)
        r, c = part_cell(p)
        dy, dx = (rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0))
        a = 1.0 - spec.intensity_jitter * rng.random() if spec.intensity_jitter else 1.0
        y0, x0 = cell + r * cell + dy, cell + c * cell + dx
        np.maximum(img[y0:y0 + cell, x0:x0 + cell], a * t, out=img[y0:y0 + cell, x0:x0 + cell])
    img = img[cell:cell + s, cell:cell + s]
    for _ in range(spec.clutter):
        _stroke(img, rng, spec.clutter_intensity)
    if spec.noise_std:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return quantize(np.clip(img, 0.0, 1.0))[:, :, None]


def _stroke(img, rng, intensity):
    """Short random line segment, drawn in place; not part of any class."""
    s = img.shape[0]
    length = rng.integers(3, 7)
    theta = rng.uniform(0, np.pi)
    y0, x0 = rng.uniform(0, s, size=2)
    a = intensity * (0.5 + 0.5 * rng.random())
    for t in range(length):
        y, x = int(y0 + t * np.sin(theta)), int(x0 + t * np.cos(theta))
        if 0 <= y < s and 0 <= x < s:
            img[y, x] = max(img[y, x], a)


def quantize(x):
    return np.round(np.asarray(x) * 255.0) / 255.0


def generate_synthetic(spec: SynthSpec | None = None) -> DataSplits:
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    known, novel = _choose_classes(spec, rng)
    n_train = spec.images_per_class - spec.heldout_per_class

    def build(combos, prefix):
        names = [f"{prefix}_{i:02d}" for i in range(len(combos))]
        imgs, labels = [], []
        for i, parts in enumerate(combos):
            for _ in range(spec.images_per_class):
                imgs.append(render(parts, spec, rng))
                labels.append(i)
        shape = (0, spec.image_size, spec.image_size, 1)
        return names, (np.stack(imgs) if imgs else np.zeros(shape)), np.array(labels, dtype=np.int64)

    k_names, k_imgs, k_labels = build(known, "known")
    n_names, n_imgs, n_labels = build(novel, "novel")
    in_class = np.tile(np.arange(spec.images_per_class), spec.n_known)
    tr = in_class < n_train
    manifest = {f"spec.{k}": v for k, v in asdict(spec).items()}
    for name, parts in zip(k_names + n_names, known + novel):
        manifest[f"class.{name}"] = "+".join(PART_NAMES[p] for p in parts)
    return DataSplits(
        Dataset(k_imgs[tr], k_labels[tr], k_names, "known_train"),
        Dataset(k_imgs[~tr], k_labels[~tr], list(k_names) if spec.heldout_per_class else [],
                "known_heldout"),
        Dataset(n_imgs, n_labels, n_names, "novel"),
        manifest,
    )


def class_parts(splits: DataSplits):
    """{class_name: [part names]} as recorded in the manifest."""
    return {k[len("class."):]: v.split("+") for k, v in splits.manifest.items()
            if k.startswith("class.")}


# -- PNM text images -----------------------------------------------------------

def write_pnm(path, img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise DataError(f"{path}: only 1 or 3 channels can be written, got {c}")
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.int64)
    magic = "P2" if c == 1 else "P3"
    rows = [" ".join(str(v) for v in q[i].reshape(-1)) for i in range(h)]
    with open(path, "w") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n" + "\n".join(rows) + "\n")


def read_pnm(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: unreadable ({exc})") from None
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise DataError(f"{path}: not a P2/P3 text image")
    c = 1 if tokens[0] == "P2" else 3
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    except (IndexError, ValueError):
        raise DataError(f"{path}: malformed header or pixel data") from None
    if maxval <= 0 or vals.size != w * h * c:
        raise DataError(f"{path}: expected {w * h * c} values, found {vals.size}")
    return (vals / maxval).reshape(h, w, c)


# -- folders -------------------------------------------------------------------

def export_folder(splits: DataSplits, path):
    root = Path(path)
    for ds in splits:
        base = root / ds.split
        base.mkdir(parents=True, exist_ok=True)
        for ci, name in enumerate(ds.class_names):
            (base / name).mkdir(exist_ok=True)
            idx = np.flatnonzero(ds.labels == ci)
            ext = "pgm" if ds.images.shape[-1] == 1 else "ppm"
            for j, i in enumerate(idx):
                write_pnm(base / name / f"{j:04d}.{ext}", ds.images[i])
    if splits.manifest:
        with open(root / "manifest.txt", "w") as fh:
            for k, v in splits.manifest.items():
                fh.write(f"{k}={v}\n")


def load_folder(path) -> DataSplits:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    size = None
    out = {}
    for split in SPLITS:
        base = root / split
        names = sorted(d.name for d in base.iterdir() if d.is_dir()) if base.is_dir() else []
        imgs, labels = [], []
        for ci, name in enumerate(names):
            for f in sorted(os.listdir(base / name)):
                if not f.endswith((".pgm", ".ppm", ".pnm")):
                    continue
                img = read_pnm(base / name / f)
                if size is None:
                    size = img.shape
                elif img.shape != size:
                    raise DataError(f"{base / name / f}: size {img.shape} differs from {size}")
                imgs.append(img)
                labels.append(ci)
        arr = np.stack(imgs) if imgs else np.zeros((0,) + (size or (0, 0, 1)))
        out[split] = Dataset(arr, np.array(labels, dtype=np.int64), names, split)
    manifest = {}
    mpath = root / "manifest.txt"
    if mpath.exists():
        for line in mpath.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                manifest[k.strip()] = v.strip()
    # empty splits created before the first image fixed the size
    for split, ds in out.items():
        if len(ds) == 0 and size is not None:
            ds.images = np.zeros((0,) + size)
    return DataSplits(out["known_train"], out["known_heldout"], out["novel"], manifest)


def spec_field_names():
    return [f.name for f in fields(SynthSpec)]
