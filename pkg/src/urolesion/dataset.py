"""Sample manifests, PPM image I/O, fold splitting and the synthetic endoscopy generator."""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import FoldError, ManifestError, ValidationError


class Procedure(str, Enum):
    URS = "URS"
    CYS = "CYS"


class Modality(str, Enum):
    WLI = "WLI"
    NBI = "NBI"


class Label(str, Enum):
    LESION = "lesion"
    NO_LESION = "no_lesion"

    @property
    def index(self) -> int:
        return 1 if self is Label.LESION else 0


LESION_CLASS = 1
CELLS = tuple((p, m, lab) for p in (Procedure.CYS, Procedure.URS) for m in (Modality.NBI, Modality.WLI)
              for lab in (Label.LESION, Label.NO_LESION))
MANIFEST_COLUMNS = ("path", "procedure", "modality", "label", "patient_id", "case_id")

Cell = tuple[Procedure, Modality, Label]

# Per-cell frame counts of the clinical collection (cystoscopy 11 cases, ureteroscopy 13).
TABLE_I: dict[Cell, int] = {
    (Procedure.CYS, Modality.NBI, Label.LESION): 337,
    (Procedure.CYS, Modality.WLI, Label.LESION): 906,
    (Procedure.CYS, Modality.NBI, Label.NO_LESION): 298,
    (Procedure.CYS, Modality.WLI, Label.NO_LESION): 1346,
    (Procedure.URS, Modality.NBI, Label.LESION): 28,
    (Procedure.URS, Modality.WLI, Label.LESION): 1801,
    (Procedure.URS, Modality.NBI, Label.NO_LESION): 227,
    (Procedure.URS, Modality.WLI, Label.NO_LESION): 1158,
}
TABLE_I_CASES = {Procedure.CYS: 11, Procedure.URS: 13}


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    procedure: Procedure
    modality: Modality
    label: Label
    patient_id: str
    case_id: str
    path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)  # H x W x 3 uint8
    bbox: tuple[int, int, int, int] | None = None  # y0, x0, y1, x1 (end-exclusive)

    def __post_init__(self):
        object.__setattr__(self, "procedure", Procedure(self.procedure))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "label", Label(self.label))
        if self.image is not None and (self.image.ndim != 3 or self.image.shape[2] != 3):
            raise ValidationError(f"{self.sample_id}: image must be H x W x 3, got {self.image.shape}")

    @property
    def cell(self) -> Cell:
        return (self.procedure, self.modality, self.label)

    def pixels(self) -> np.ndarray:
        """Image as float32 H x W x 3 in [0, 1], decoding from disk when needed."""
        img = self.image if self.image is not None else read_ppm(self.path)
        return img.astype(np.float32) / np.float32(255.0)


def empty_composition() -> dict[Cell, int]:
    return {cell: 0 for cell in CELLS}


class DatasetManifest:
    """Immutable ordered collection of samples with its per-cell tally."""

    def __init__(self, samples: Iterable[Sample] = ()):
        self.samples: tuple[Sample, ...] = tuple(samples)
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate sample ids in manifest")
        comp = empty_composition()
        for s in self.samples:
            comp[s.cell] += 1
        self.composition: dict[Cell, int] = comp

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return DatasetManifest(self.samples[i])
        return self.samples[i]

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.samples[i] for i in indices)

    def filter(self, pred: Callable[[Sample], bool]) -> "DatasetManifest":
        return DatasetManifest(s for s in self.samples if pred(s))

    def __add__(self, other: "DatasetManifest") -> "DatasetManifest":
        return DatasetManifest(self.samples + other.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label.index for s in self.samples], dtype=np.int64)

    @property
    def procedures(self) -> set[Procedure]:
        return {s.procedure for s in self.samples}

    def count(self, procedure=None, modality=None, label=None) -> int:
        return sum(n for (p, m, lab), n in self.composition.items()
                   if (procedure is None or p == procedure) and (modality is None or m == modality)
                   and (label is None or lab == label))

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        """Stack samples into an N x 3 x H x W float32 batch."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        if not chosen:
            raise ValidationError("no samples selected")
        arrs = [s.pixels() for s in chosen]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise ValidationError(f"mixed image sizes in batch: {sorted(shapes)}")
        return np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2))

    def one_hot(self, indices: Sequence[int] | None = None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[list(indices)]
        out = np.zeros((len(labels), 2), dtype=np.float32)
        out[np.arange(len(labels)), labels] = 1
        return out

    def content_hash(self) -> str:
        """Order-sensitive hash of ids, labels and pixel content."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(f"{s.sample_id}|{s.procedure.value}|{s.modality.value}|{s.label.value}|".encode())
            if s.image is not None:
                h.update(s.image.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# portable pixmap


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"ppm needs H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        out.append(int(buf[start:pos]))
    return out, pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Decode binary (P6) or ASCII (P3) pixmaps with maxval <= 255."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P6", b"P3"):
        raise ValueError(f"not a portable pixmap (magic {magic!r})")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, 2)
    if not 0 < maxval <= 255 or w <= 0 or h <= 0:
        raise ValueError(f"unsupported pixmap header {w}x{h} maxval {maxval}")
    if magic == b"P6":
        data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1) \
            if len(buf) >= pos + 1 + w * h * 3 else None
        if data is None:
            raise ValueError("truncated pixel data")
    else:
        data = np.array(buf[pos:].split()[: w * h * 3], dtype=np.int64)
        if data.size != w * h * 3:
            raise ValueError("truncated pixel data")
    img = data.reshape(h, w, 3).astype(np.float64)
    if maxval != 255:
        img = np.round(img * 255.0 / maxval)
    return img.astype(np.uint8)


Decoder = Callable[[str], np.ndarray]
DEFAULT_DECODERS: dict[str, Decoder] = {".ppm": read_ppm, ".pnm": read_ppm}


# ---------------------------------------------------------------------------
# ingestion


def ingest_manifest(csv_path: str | os.PathLike, image_root: str | os.PathLike | None = None,
                    decoders: Mapping[str, Decoder] | None = None) -> DatasetManifest:
    """Read a manifest CSV, decoding every referenced image.

    Extra decoders can be registered per file extension; PPM is built in.
    """
    csv_path = Path(csv_path)
    root = Path(image_root) if image_root is not None else csv_path.parent
    table = dict(DEFAULT_DECODERS)
    if decoders:
        table.update({k.lower(): v for k, v in decoders.items()})
    samples = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError("missing header row", row=1)
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"missing columns {missing}", row=1)
        for rowno, row in enumerate(reader, start=2):
            try:
                proc = Procedure(row["procedure"].strip().upper())
                mod = Modality(row["modality"].strip().upper())
                label = Label(row["label"].strip().lower())
            except ValueError as exc:
                raise ManifestError(str(exc), row=rowno) from None
            rel = row["path"].strip()
            full = Path(rel) if Path(rel).is_absolute() else root / rel
            if not full.is_file():
                raise ManifestError(f"image not found: {full}", row=rowno)
            decoder = table.get(full.suffix.lower())
            if decoder is None:
                raise ManifestError(f"no decoder for {full.suffix!r} files", row=rowno)
            try:
                image = np.asarray(decoder(str(full)))
            except Exception as exc:  # decoder failures surface with the row number
                raise ManifestError(f"cannot decode {full}: {exc}", row=rowno) from None
            if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
                raise ManifestError(f"decoded image must be H x W x 3 uint8, got {image.shape}", row=rowno)
            samples.append(Sample(sample_id=rel, procedure=proc, modality=mod, label=label,
                                  patient_id=row["patient_id"].strip(), case_id=row["case_id"].strip(),
                                  path=str(full), image=image))
    return DatasetManifest(samples)


def write_manifest(manifest: DatasetManifest, csv_path: str | os.PathLike, root: str | os.PathLike) -> None:
    root = Path(root)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in manifest:
            rel = os.path.relpath(s.path, root) if s.path else s.sample_id
            w.writerow([Path(rel).as_posix(), s.procedure.value, s.modality.value, s.label.value,
                        s.patient_id, s.case_id])


def load_ground_truth(manifest: DatasetManifest, csv_path: str | os.PathLike) -> DatasetManifest:
    """Attach blob bounding boxes from a generator ground-truth CSV."""
    boxes = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["bbox_y0"]:
                boxes[row["path"]] = tuple(int(row[k]) for k in ("bbox_y0", "bbox_x0", "bbox_y1", "bbox_x1"))
    return DatasetManifest(replace(s, bbox=boxes.get(s.sample_id)) for s in manifest)


def domain_filter(manifest: DatasetManifest, procedures: Iterable[Procedure | str]) -> DatasetManifest:
    wanted = {Procedure(p) for p in procedures}
    if not wanted:
        raise ValidationError("domain_filter needs at least one procedure")
    return manifest.filter(lambda s: s.procedure in wanted)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: tuple[int, ...]  # fold index per manifest position
    mode: str

    def fold(self, i: int) -> list[int]:
        return [j for j, f in enumerate(self.assignment) if f == i]

    def train(self, i: int) -> list[int]:
        return [j for j, f in enumerate(self.assignment) if f != i]

    def folds(self) -> list[list[int]]:
        return [self.fold(i) for i in range(self.k)]


def split_folds(manifest: DatasetManifest, k: int = 3, mode: str = "by_label", seed: int = 0) -> FoldSplit:
    """Deterministic stratified k-fold partition.

    ``by_label`` deals each class round-robin into the folds (per-fold class
    counts differ from n_c/k by less than one). ``by_patient_then_label``
    keeps every patient inside one fold, assigning patients greedily to the
    fold with the fewest samples of that patient's majority label.
    """
    n = len(manifest)
    if k < 1:
        raise FoldError(f"k must be positive, got {k}")
    rng = np.random.default_rng(seed)
    assign = np.full(n, -1, dtype=np.int64)
    labels = manifest.labels
    if mode == "by_label":
        if k > n:
            raise FoldError(f"k={k} exceeds {n} samples")
        start = 0
        for cls in (1, 0):
            idx = np.flatnonzero(labels == cls)
            idx = idx[rng.permutation(idx.size)]
            assign[idx] = (start + np.arange(idx.size)) % k
            start = (start + idx.size) % k
    elif mode == "by_patient_then_label":
        patients: dict[str, list[int]] = {}
        for j, s in enumerate(manifest):
            patients.setdefault(s.patient_id, []).append(j)
        if k > len(patients):
            raise FoldError(f"k={k} exceeds {len(patients)} patients")
        names = sorted(patients)
        names = [names[i] for i in rng.permutation(len(names))]
        names.sort(key=lambda p: -len(patients[p]))  # stable: ties keep the shuffled order
        per_label = np.zeros((k, 2), dtype=np.int64)
        for p in names:
            members = patients[p]
            counts = np.bincount(labels[members], minlength=2)
            major = int(np.argmax(counts))
            target = min(range(k), key=lambda f: (per_label[f].sum(), per_label[f, major], f))
            assign[members] = target
            per_label[target] += counts
    else:
        raise FoldError(f"unknown stratification mode {mode!r}")
    return FoldSplit(k, tuple(int(a) for a in assign), mode)


# ---------------------------------------------------------------------------
# synthetic data


# background tint per (procedure, modality)
PALETTES = {
    (Procedure.CYS, Modality.WLI): (0.85, 0.50, 0.45),
    (Procedure.CYS, Modality.NBI): (0.40, 0.50, 0.35),
    (Procedure.URS, Modality.WLI): (0.80, 0.45, 0.35),
    (Procedure.URS, Modality.NBI): (0.35, 0.50, 0.55),
}
# lesion colour: yellowish papillary tissue in the bladder, magenta tissue in the
# upper tract. Both are brighter than the mucosa; dark lesions were learned far
# worse by randomly initialised residual nets at desk scale.
LESION_COLORS = {
    (Procedure.CYS, Modality.WLI): (1.00, 0.92, 0.55),
    (Procedure.CYS, Modality.NBI): (0.85, 0.90, 0.55),
    (Procedure.URS, Modality.WLI): (0.95, 0.55, 0.95),
    (Procedure.URS, Modality.NBI): (0.85, 0.35, 0.80),
}
BLOB_RADIUS = (0.18, 0.28)  # fraction of the image side
ORACLE_TOLERANCE = 0.15


def scale_composition(composition: Mapping[Cell, int], divisor: float) -> dict[Cell, int]:
    return {cell: int(np.floor(n / divisor)) for cell, n in composition.items()}


def uniform_composition(per_cell: int) -> dict[Cell, int]:
    return {cell: per_cell for cell in CELLS}


def _smooth_field(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    f = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        f += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    return f / max(np.abs(f).max(), 1e-9)


def _vessels(rng, h, w, count):
    """Thin dark curves: sinusoidal paths with random orientation."""
    mask = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(count):
        theta = rng.uniform(0, np.pi)
        c = rng.uniform(0.2, 0.8) * np.array([h, w])
        u = (yy - c[0]) * np.cos(theta) + (xx - c[1]) * np.sin(theta)
        v = -(yy - c[0]) * np.sin(theta) + (xx - c[1]) * np.cos(theta)
        amp = rng.uniform(0.03, 0.08) * h
        per = rng.uniform(0.3, 0.7) * h
        width = max(0.6, 0.012 * h)
        mask |= np.abs(v - amp * np.sin(2 * np.pi * u / per)) < width
    return mask


def render_image(rng: np.random.Generator, procedure: Procedure, modality: Modality, lesion: bool,
                 resolution: int) -> tuple[np.ndarray, tuple[int, int, int, int] | None]:
    """One synthetic frame as uint8 plus the lesion bounding box (or None)."""
    h = w = resolution
    base = np.array(PALETTES[(procedure, modality)])
    field_ = _smooth_field(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = ((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / ((h / 2) ** 2 + (w / 2) ** 2)
    shade = (1 + 0.10 * field_) * (1 - 0.12 * r2)
    img = base[None, None, :] * shade[..., None]
    if procedure is Procedure.CYS:
        vmask = _vessels(rng, h, w, int(rng.integers(2, 5)))
        img[vmask] = base * 0.55
    else:
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0.1, 0.9, size=2) * (h, w)
            rad = max(0.7, rng.uniform(0.015, 0.035) * h)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2] = 0.97
    bbox = None
    if lesion:
        ry, rx = rng.uniform(*BLOB_RADIUS, size=2) * (h, w)
        m = max(ry, rx) + 1
        cy = rng.uniform(m, h - 1 - m)
        cx = rng.uniform(m, w - 1 - m)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(theta) + dx * np.sin(theta)) / ry
        v = (-dy * np.sin(theta) + dx * np.cos(theta)) / rx
        blob = u ** 2 + v ** 2 <= 1.0
        period = max(2.0, 0.08 * h)
        texture = 1 + 0.06 * np.sin(2 * np.pi * yy / period) * np.sin(2 * np.pi * xx / period)
        color = np.array(LESION_COLORS[(procedure, modality)])
        img[blob] = color[None, :] * texture[blob][:, None]
        ys, xs = np.nonzero(blob)
        bbox = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
    img += rng.uniform(-0.02, 0.02, size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), bbox


def blob_oracle(image: np.ndarray, procedure: Procedure, modality: Modality) -> bool:
    """Pixel-statistics lesion detector: enough pixels near the lesion colour."""
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else np.asarray(image, np.float64)
    color = np.array(LESION_COLORS[(Procedure(procedure), Modality(modality))])
    near = np.abs(img - color).max(axis=-1) <= ORACLE_TOLERANCE
    h, w = near.shape
    min_area = 0.5 * np.pi * (BLOB_RADIUS[0] * h) * (BLOB_RADIUS[0] * w)
    return bool(near.sum() >= min_area)


def blob_mask(image: np.ndarray, procedure: Procedure, modality: Modality) -> np.ndarray:
    img = image.astype(np.float64) / 255.0
    color = np.array(LESION_COLORS[(Procedure(procedure), Modality(modality))])
    return np.abs(img - color).max(axis=-1) <= ORACLE_TOLERANCE


def generate_synthetic(
    composition: Mapping[Cell, int],
    resolution: int = 64,
    seed: int = 0,
    patients_per_procedure: int | Mapping[Procedure, int] = 3,
    output_dir: str | os.PathLike | None = None,
) -> DatasetManifest:
    """Deterministic synthetic frames for every (procedure, modality, label) cell.

    Frames are spread round-robin over the patients of their procedure. With
    ``output_dir`` the images, ``manifest.csv`` and ``ground_truth.csv`` are
    written there as well.
    """
    if resolution <= 0:
        raise ValidationError(f"resolution must be positive, got {resolution}")
    comp = empty_composition()
    for cell, n in composition.items():
        cell = (Procedure(cell[0]), Modality(cell[1]), Label(cell[2]))
        if n < 0:
            raise ValidationError(f"negative count for {cell}")
        comp[cell] = int(n)
    if isinstance(patients_per_procedure, Mapping):
        n_pat = {Procedure(k): int(v) for k, v in patients_per_procedure.items()}
    else:
        n_pat = {p: int(patients_per_procedure) for p in Procedure}
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(seed)
    children = root.spawn(sum(comp.values()))
    samples = []
    j = 0
    counters = {p: 0 for p in Procedure}
    for cell in CELLS:
        proc, mod, label = cell
        for i in range(comp[cell]):
            rng = np.random.default_rng(children[j])
            j += 1
            img, bbox = render_image(rng, proc, mod, label is Label.LESION, resolution)
            patient = f"{proc.value}-P{counters[proc] % n_pat[proc] + 1:02d}"
            counters[proc] += 1
            sid = f"images/{proc.value}_{mod.value}_{label.value}_{i:05d}.ppm"
            path = None
            if out is not None:
                path = str(out / sid)
                write_ppm(path, img)
            samples.append(Sample(sample_id=sid, procedure=proc, modality=mod, label=label,
                                  patient_id=patient, case_id=f"{patient}-V1", path=path, image=img,
                                  bbox=bbox))
    manifest = DatasetManifest(samples)
    if out is not None:
        write_manifest(manifest, out / "manifest.csv", out)
        with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "bbox_y0", "bbox_x0", "bbox_y1", "bbox_x1"])
            for s in manifest:
                w.writerow([s.sample_id, *(s.bbox if s.bbox else ("", "", "", ""))])
    return manifest
