"""Volumes, annotation preprocessing, synthetic cases, and file I/O.

A case is one intensity volume plus exactly four binary annotation
masks on the same grid; missing annotations are padded with empty
masks and the count of real ones is kept. Preprocessing covers
annotation clustering by physical distance, trilinear/nearest
resampling to a target voxel spacing, and center-of-mass cropping.

The synthetic generator stands in for a real multi-rater CT corpus:
each case carries one ellipsoidal lesion and four annotations drawn
from a two-mode rule (tight boundary vs. dilated boundary), so rater
disagreement has known structure that a sidecar manifest records.

Case files use a little-endian binary layout (magic "VU3D"); reads
and writes round-trip bitwise and malformed files fail with the byte
offset where parsing stopped.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ShapeError, UsageError

TARGET_SPACING = (1.0, 0.5, 0.5)
SYNTH_GRID = (16, 32, 32)
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Volume3D:
    """Intensity grid with per-axis voxel spacing in millimeters.

    Axes are ordered (z, y, x), row-major; spacing[i] belongs to axis i.
    """

    intensities: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.intensities.shape}")
        if min(self.intensities.shape) < 1:
            raise ShapeError(f"volume extents must be >= 1, got {self.intensities.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise UsageError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def grid(self) -> tuple:
        return self.intensities.shape


@dataclass
class LesionCase:
    """One volume with exactly four annotation masks (padded as needed)."""

    case_id: str
    volume: Volume3D
    annotations: list
    n_real_annotations: int

    def __post_init__(self):
        if len(self.annotations) != 4:
            raise UsageError(f"a case carries exactly 4 annotations, got {len(self.annotations)}")
        self.annotations = [np.asarray(m, dtype=np.uint8) for m in self.annotations]
        for m in self.annotations:
            if m.shape != self.volume.grid:
                raise ShapeError(f"annotation grid {m.shape} != volume grid {self.volume.grid}")
            if m.max(initial=0) > 1:
                raise UsageError("annotation masks must be binary (0/1)")
        if not 1 <= self.n_real_annotations <= 4:
            raise UsageError(f"n_real_annotations must be in [1,4], got {self.n_real_annotations}")
        if not any(m.any() for m in self.annotations):
            raise UsageError("at least one annotation must be nonempty")


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fractions: tuple = SPLIT_FRACTIONS
    seed: int = 0

    def as_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "fractions": list(self.fractions), "seed": self.seed}


# ---------------------------------------------------------------------
# preprocessing operators
# ---------------------------------------------------------------------

def cluster_annotations(masks, spacing) -> list:
    """Group annotations whose minimum inter-voxel physical distance is
    at most max(spacing), closed transitively (single linkage).

    Returns groups as sorted lists of input indices, ordered by their
    smallest member. Empty masks form singleton groups.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    masks = [np.asarray(m) for m in masks]
    n = len(masks)
    if n == 0:
        return []
    coords = [np.argwhere(m.astype(bool)) * spacing for m in masks]
    threshold = float(spacing.max())

    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        if coords[i].shape[0] == 0:
            continue
        for j in range(i + 1, n):
            if coords[j].shape[0] == 0:
                continue
            diff = coords[i][:, None, :] - coords[j][None, :, :]
            dmin = float(np.sqrt((diff * diff).sum(axis=2)).min())
            if dmin <= threshold:
                parent[find(i)] = find(j)

    groups: dict = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def _sample_positions(old_extent: int, old_sp: float, new_sp: float) -> np.ndarray:
    """New-grid voxel positions expressed in old-grid index coordinates,
    clamped so degenerate axes never index out of range."""
    new_extent = int(np.floor(old_extent * old_sp / new_sp + 0.5))
    new_extent = max(new_extent, 1)
    pos = np.arange(new_extent, dtype=np.float64) * (new_sp / old_sp)
    return np.clip(pos, 0.0, old_extent - 1)


def resample(v: Volume3D, target_spacing=TARGET_SPACING) -> Volume3D:
    """Trilinear resampling to the target spacing.

    New extents are round(old * old_spacing / target_spacing), half up.
    """
    pos = [_sample_positions(v.grid[ax], v.spacing[ax], target_spacing[ax])
           for ax in range(3)]
    arr = v.intensities.astype(np.float64)
    for ax in range(3):
        i0 = np.floor(pos[ax]).astype(int)
        i1 = np.minimum(i0 + 1, v.grid[ax] - 1)
        frac = pos[ax] - i0
        lo = np.take(arr, i0, axis=ax)
        hi = np.take(arr, i1, axis=ax)
        shape = [1, 1, 1]
        shape[ax] = len(pos[ax])
        f = frac.reshape(shape)
        arr = lo * (1.0 - f) + hi * f
    return Volume3D(intensities=arr.astype(np.float32), spacing=tuple(target_spacing))


def resample_mask(mask: np.ndarray, spacing, target_spacing=TARGET_SPACING) -> np.ndarray:
    """Nearest-neighbor resampling for binary masks; stays binary."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"mask must be 3D, got shape {mask.shape}")
    idx = [np.floor(_sample_positions(mask.shape[ax], spacing[ax], target_spacing[ax]) + 0.5).astype(int)
           for ax in range(3)]
    idx = [np.minimum(ix, mask.shape[ax] - 1) for ax, ix in enumerate(idx)]
    return mask[np.ix_(*idx)].astype(np.uint8)


def _round_half_down(c: float) -> int:
    # exact .5 goes to the lower index
    return int(np.ceil(c - 0.5))


def crop_center(v: Volume3D, masks, size) -> tuple:
    """Window of the given extents centered on the center of mass of the
    first mask; regions outside the volume pad with the volume minimum
    (masks pad with zero). Returns (cropped volume, cropped masks)."""
    masks = [np.asarray(m) for m in masks]
    if len(masks) == 0:
        raise UsageError("crop_center needs at least one mask")
    src = masks[0].astype(bool)
    if not src.any():
        raise UsageError("center-source mask is empty; cases need a real first annotation")
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise UsageError(f"crop size must be positive, got {size}")
    com = np.argwhere(src).mean(axis=0)
    center = [_round_half_down(c) for c in com]
    starts = [center[ax] - size[ax] // 2 for ax in range(3)]

    def window(arr: np.ndarray, pad_value):
        out = np.full(size, pad_value, dtype=arr.dtype)
        src_lo = [max(0, starts[ax]) for ax in range(3)]
        src_hi = [min(arr.shape[ax], starts[ax] + size[ax]) for ax in range(3)]
        if any(src_lo[ax] >= src_hi[ax] for ax in range(3)):
            return out
        dst_lo = [src_lo[ax] - starts[ax] for ax in range(3)]
        dst_hi = [dst_lo[ax] + (src_hi[ax] - src_lo[ax]) for ax in range(3)]
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            arr[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
        return out

    vol = Volume3D(intensities=window(v.intensities, v.intensities.min()),
                   spacing=v.spacing)
    return vol, [window(m.astype(np.uint8), 0) for m in masks]


def pad_annotations_to4(masks) -> tuple:
    """Pad 1-4 masks to exactly 4 with empties; returns (masks, n_real)."""
    masks = [np.asarray(m, dtype=np.uint8) for m in masks]
    if not 1 <= len(masks) <= 4:
        raise UsageError(f"expected 1-4 annotation masks, got {len(masks)}")
    n_real = len(masks)
    grid = masks[0].shape
    padded = list(masks) + [np.zeros(grid, dtype=np.uint8) for _ in range(4 - n_real)]
    return padded, n_real


# ---------------------------------------------------------------------
# synthetic two-mode cases
# ---------------------------------------------------------------------

def _ellipsoid_mask(grid, center, radii) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(g, dtype=np.float64) for g in grid),
                             indexing="ij")
    q = (((zz - center[0]) / radii[0]) ** 2
         + ((yy - center[1]) / radii[1]) ** 2
         + ((xx - center[2]) / radii[2]) ** 2)
    return (q <= 1.0).astype(np.uint8)


def mode_masks_from_record(record: dict) -> tuple:
    """Rebuild the tight (mode A) and dilated (mode B) lesion masks from
    a manifest record; the generator derives every annotation from one
    of these two."""
    grid = tuple(record["grid"])
    center = record["center"]
    radii = record["radii"]
    d = record["dilation"]
    mask_a = _ellipsoid_mask(grid, center, radii)
    mask_b = _ellipsoid_mask(grid, center, [r + d for r in radii])
    return mask_a, mask_b


def synth_generate(n_cases: int, grid=SYNTH_GRID, seed: int = 0,
                   p_miss: float = 0.08) -> tuple:
    """Generate cases with a two-mode annotation rule.

    Each case has one ellipsoidal lesion; every annotator independently
    segments either its tight boundary (mode A) or a boundary dilated by
    1-2 voxels (mode B), or misses the lesion entirely with probability
    p_miss (an empty mask, dropped and padded). Returns (cases, records)
    where records hold enough parameters to rebuild every mask.
    """
    if n_cases < 1:
        raise UsageError(f"n_cases must be >= 1, got {n_cases}")
    rng = np.random.default_rng(seed)
    grid = tuple(int(g) for g in grid)
    cases = []
    records = []
    for idx in range(n_cases):
        case_id = f"case{idx:04d}"
        center = [float(rng.uniform(0.3 * g, 0.7 * g)) for g in grid]
        radii = [float(rng.uniform(0.10 * g, 0.18 * g)) for g in grid]
        dilation = int(rng.integers(1, 3))
        while True:
            modes = []
            for _ in range(4):
                if rng.random() < p_miss:
                    modes.append("miss")
                else:
                    modes.append("A" if rng.random() < 0.5 else "B")
            if any(m != "miss" for m in modes):
                break
        mask_a = _ellipsoid_mask(grid, center, radii)
        mask_b = _ellipsoid_mask(grid, center, [r + dilation for r in radii])
        by_mode = {"A": mask_a, "B": mask_b}
        real = [by_mode[m] for m in modes if m != "miss"]
        annotations, n_real = pad_annotations_to4(real)
        slot_modes = [m for m in modes if m != "miss"] + ["empty"] * (4 - n_real)

        bg_amp = rng.uniform(0.05, 0.15, size=3)
        bg_phase = rng.uniform(0.0, 2 * np.pi, size=3)
        axes = np.meshgrid(*(np.arange(g, dtype=np.float64) / g for g in grid),
                           indexing="ij")
        background = sum(bg_amp[ax] * np.cos(2 * np.pi * axes[ax] + bg_phase[ax])
                         for ax in range(3))
        intens = (background
                  + 1.0 * mask_a
                  + 0.45 * (mask_b & ~mask_a.astype(bool))
                  + rng.normal(0.0, 0.1, size=grid))
        volume = Volume3D(intensities=intens.astype(np.float32),
                          spacing=TARGET_SPACING)
        cases.append(LesionCase(case_id=case_id, volume=volume,
                                annotations=annotations,
                                n_real_annotations=n_real))
        records.append({"case_id": case_id, "grid": list(grid),
                        "spacing": list(TARGET_SPACING),
                        "center": center, "radii": radii,
                        "dilation": dilation,
                        "annotator_modes": modes,
                        "slot_modes": slot_modes,
                        "two_mode": len({m for m in modes if m != "miss"}) == 2})
    return cases, records


def split_dataset(cases, fractions=SPLIT_FRACTIONS, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous partition of case ids."""
    ids = [c.case_id if isinstance(c, LesionCase) else str(c) for c in cases]
    if len(set(ids)) != len(ids):
        raise UsageError("case ids must be unique")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be three values summing to 1, got {fractions}")
    n = len(ids)
    n_train = int(np.floor(n * fractions[0] + 0.5))
    n_val = int(np.floor(n * fractions[1] + 0.5))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise UsageError(f"{n} cases cannot fill all three splits with fractions {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train],
                        val=shuffled[n_train:n_train + n_val],
                        test=shuffled[n_train + n_val:],
                        fractions=tuple(fractions), seed=seed)


# ---------------------------------------------------------------------
# case-file format (little-endian, magic "VU3D")
# ---------------------------------------------------------------------

MAGIC = b"VU3D"
FORMAT_VERSION = 1


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise DataFormatError(f"truncated while reading {what}: "
                                  f"need {n} bytes, have {len(self.buf) - self.off}",
                                  offset=self.off)
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def write_case(path, case: LesionCase) -> None:
    d, h, w = case.volume.grid
    cid = case.case_id.encode("utf-8")
    if len(cid) > 0xFFFF:
        raise UsageError("case_id too long to serialize")
    parts = [MAGIC,
             struct.pack("<I", FORMAT_VERSION),
             struct.pack("<3I", d, h, w),
             struct.pack("<3f", *case.volume.spacing),
             case.volume.intensities.astype("<f4").tobytes(),
             struct.pack("<B", 4)]
    for m in case.annotations:
        parts.append(m.astype(np.uint8).tobytes())
    parts.append(struct.pack("<B", case.n_real_annotations))
    parts.append(struct.pack("<H", len(cid)))
    parts.append(cid)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_case(path) -> LesionCase:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = r.unpack("I", "format version")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {version}", offset=4)
    d, h, w = r.unpack("3I", "grid extents")
    if min(d, h, w) < 1:
        raise DataFormatError(f"grid extents must be >= 1, got {(d, h, w)}", offset=8)
    spacing = r.unpack("3f", "voxel spacing")
    if any(s <= 0 for s in spacing):
        raise DataFormatError(f"spacing must be positive, got {spacing}", offset=20)
    nvox = d * h * w
    intens = np.frombuffer(r.take(4 * nvox, "intensity payload"),
                           dtype="<f4").reshape(d, h, w)
    count_off = r.off
    (count,) = r.unpack("B", "annotation count")
    if count != 4:
        raise DataFormatError(f"annotation count must be 4, got {count}", offset=count_off)
    masks = []
    for i in range(4):
        mask_off = r.off
        m = np.frombuffer(r.take(nvox, f"annotation {i} payload"),
                          dtype=np.uint8).reshape(d, h, w)
        if m.max(initial=0) > 1:
            raise DataFormatError(f"annotation {i} has non-binary voxels", offset=mask_off)
        masks.append(m.copy())
    nreal_off = r.off
    (n_real,) = r.unpack("B", "n_real_annotations")
    if not 1 <= n_real <= 4:
        raise DataFormatError(f"n_real_annotations must be in [1,4], got {n_real}",
                              offset=nreal_off)
    (id_len,) = r.unpack("H", "case_id length")
    id_off = r.off
    try:
        case_id = r.take(id_len, "case_id").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"case_id is not valid UTF-8: {exc}", offset=id_off) from None
    if r.off != len(r.buf):
        raise DataFormatError(f"{len(r.buf) - r.off} trailing bytes after case payload",
                              offset=r.off)
    volume = Volume3D(intensities=intens.copy(), spacing=spacing)
    return LesionCase(case_id=case_id, volume=volume, annotations=masks,
                      n_real_annotations=n_real)


# ---------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------

def save_dataset(dirpath, cases, records, split: DatasetSplit) -> None:
    """Writes cases/<id>.vu3d, manifest.jsonl (records + split field),
    and split.json under dirpath."""
    import os

    os.makedirs(os.path.join(dirpath, "cases"), exist_ok=True)
    split_of = {}
    for name in ("train", "val", "test"):
        for cid in getattr(split, name):
            split_of[cid] = name
    with open(os.path.join(dirpath, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            rec = dict(rec, split=split_of.get(rec["case_id"]))
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    with open(os.path.join(dirpath, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(split.as_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    for case in cases:
        write_case(os.path.join(dirpath, "cases", case.case_id + ".vu3d"), case)


def load_manifest(dirpath) -> list:
    import os

    path = os.path.join(dirpath, "manifest.jsonl")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_dataset(dirpath, split_name: str | None = None) -> tuple:
    """Returns (cases, records) ordered as the manifest; pass a split
    name ("train"/"val"/"test") to load only that subset."""
    import os

    records = load_manifest(dirpath)
    if split_name is not None:
        if split_name not in ("train", "val", "test"):
            raise UsageError(f"unknown split {split_name!r}")
        records = [r for r in records if r.get("split") == split_name]
    cases = [read_case(os.path.join(dirpath, "cases", r["case_id"] + ".vu3d"))
             for r in records]
    return cases, records
