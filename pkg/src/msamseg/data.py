"""Synthetic PET-CT phantom data: generation, persistence, and the
training-protocol plumbing (folds, normalization, augmentation).

Each synthetic patient gets a fixed anatomy: a body ellipse, a bright
high-density organ, and one or two mid-density organs on CT.  Tumors and
benign lesions look identical on CT (the same subtle contrast bump); they
differ only in PET uptake level, and each slice's PET values are scaled
by a random calibration gain, so telling them apart requires relative
uptake reasoning on PET while the lesion boundary is sharpest on CT.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeding import stream

SCHEMA_VERSION = 1
STD_FLOOR = 1e-6


class DatasetError(IOError):
    """Raised when a dataset directory is missing, corrupt, or malformed."""


@dataclass
class SliceTriplet:
    """One co-registered PET/CT/mask slice for one patient."""

    pet: np.ndarray  # [1,1,H,W] float32
    ct: np.ndarray   # [1,1,H,W] float32
    mask: np.ndarray  # [1,1,H,W] float32 in {0,1}
    patient_id: str
    slice_index: int


@dataclass
class PhantomSlice(SliceTriplet):
    """Generator-side slice that also knows where benign hotspots are."""

    hotspot_mask: np.ndarray = None  # [1,1,H,W] float32 in {0,1}


@dataclass(frozen=True)
class PhantomSpec:
    patients: int = 50
    slices_per_patient: tuple = (3, 5)
    size: tuple = (64, 64)
    tumors_per_slice: tuple = (1, 2)
    benign_hotspots_per_slice: tuple = (0, 2)
    ct_tumor_contrast: float = 0.05
    pet_tumor_uptake: float = 1.0
    pet_benign_uptake: float = 0.45
    organ_pet_uptake: float = 0.0  # physiological uptake of the bright organ
    pet_noise: float = 0.05
    ct_noise: float = 0.02
    pet_blur: float = 1.0  # scanner point-spread sigma, pixels
    pet_gain_range: tuple = (1.0, 1.0)  # per-slice uptake calibration spread
    seed: int = 0

    def __post_init__(self):
        if self.patients < 1:
            raise ValueError("patients must be >= 1")
        for name in ("slices_per_patient", "tumors_per_slice", "benign_hotspots_per_slice"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty or negative")
        if self.tumors_per_slice[1] < 1:
            raise ValueError("tumors_per_slice must allow at least one tumor")
        if min(self.ct_tumor_contrast, self.pet_tumor_uptake,
               self.pet_benign_uptake, self.organ_pet_uptake) < 0:
            raise ValueError("contrasts and uptakes must be >= 0")
        glo, ghi = self.pet_gain_range
        if glo > ghi or glo <= 0:
            raise ValueError(f"pet_gain_range {self.pet_gain_range} is empty or nonpositive")
        h, w = self.size
        if h < 16 or w < 16:
            raise ValueError(f"phantom size {self.size} too small")


@dataclass(frozen=True)
class NormalizationStats:
    modality: str
    mean: float
    std: float


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_ids: tuple
    test_ids: tuple


# ---------------------------------------------------------------------------
# geometry helpers

def _ellipse(h, w, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


@dataclass
class _Anatomy:
    body: tuple       # (cy, cx, ry, rx)
    bright: tuple     # the high-density organ hotspots live in
    others: list      # list of (cy, cx, ry, rx, intensity)


def _sample_anatomy(rng, h, w):
    body = (h / 2 + rng.uniform(-2, 2), w / 2 + rng.uniform(-2, 2),
            h * 0.42 + rng.uniform(-2, 2), w * 0.46 + rng.uniform(-2, 2))
    bright = (rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w),
              rng.uniform(6, 10), rng.uniform(6, 10))
    others = []
    for intensity in (0.50, 0.40)[: rng.integers(1, 3)]:
        others.append((rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w),
                       rng.uniform(4, 8), rng.uniform(4, 8), intensity))
    return _Anatomy(body, bright, others)


def _jitter(rng, ellipse_params, pos=1.0, size=0.5):
    cy, cx, ry, rx = ellipse_params[:4]
    return (cy + rng.uniform(-pos, pos), cx + rng.uniform(-pos, pos),
            max(2.0, ry + rng.uniform(-size, size)), max(2.0, rx + rng.uniform(-size, size)))


def generate_slices(spec):
    """All phantom slices for a spec, deterministic given spec.seed.

    Returns PhantomSlice objects (with hotspot masks); every slice is
    guaranteed to contain at least one tumor pixel.
    """
    h, w = spec.size
    out = []
    for pidx in range(spec.patients):
        pid = f"p{pidx:03d}"
        prng = stream(spec.seed, f"patient/{pidx}")
        anatomy = _sample_anatomy(prng, h, w)
        n_slices = int(prng.integers(spec.slices_per_patient[0], spec.slices_per_patient[1] + 1))
        for sidx in range(n_slices):
            srng = stream(spec.seed, f"patient/{pidx}/slice/{sidx}")
            out.append(_render_slice(srng, spec, anatomy, pid, sidx))
    return out


def _render_slice(rng, spec, anatomy, pid, sidx):
    h, w = spec.size
    body = _ellipse(h, w, *_jitter(rng, anatomy.body))
    bright = _ellipse(h, w, *_jitter(rng, anatomy.bright)) & body

    ct = np.full((h, w), 0.12, np.float64)
    ct[body] = 0.30
    for organ in anatomy.others:
        region = _ellipse(h, w, *_jitter(rng, organ)) & body
        ct[region] = organ[4]
    ct[bright] = 0.85

    mask = np.zeros((h, w), bool)
    n_tumors = int(rng.integers(spec.tumors_per_slice[0], spec.tumors_per_slice[1] + 1))
    n_tumors = max(1, n_tumors)
    tumors = []
    for _ in range(n_tumors):
        for _attempt in range(60):
            cy = rng.uniform(0.15 * h, 0.85 * h)
            cx = rng.uniform(0.15 * w, 0.85 * w)
            ry = rng.uniform(2.5, 6.0)
            rx = rng.uniform(2.5, 6.0)
            angle = rng.uniform(0, math.pi)
            region = _ellipse(h, w, cy, cx, ry, rx, angle)
            inside = region & body
            if inside.sum() >= 4 and not (region & bright).any():
                tumors.append(inside)
                mask |= inside
                break

    # benign lesions: same CT appearance as tumors, milder PET uptake
    hotspots = np.zeros((h, w), bool)
    benign = []
    lo, hi = spec.benign_hotspots_per_slice
    n_benign = int(rng.integers(lo, hi + 1))
    for _ in range(n_benign):
        for _attempt in range(60):
            cy = rng.uniform(0.15 * h, 0.85 * h)
            cx = rng.uniform(0.15 * w, 0.85 * w)
            region = _ellipse(h, w, cy, cx, rng.uniform(2.5, 6.0), rng.uniform(2.5, 6.0),
                              rng.uniform(0, math.pi))
            inside = region & body
            if inside.sum() >= 4 and not (region & bright).any() and not (region & mask).any():
                benign.append(inside)
                hotspots |= inside
                break

    pet = np.zeros((h, w), np.float64)
    pet[body] = 0.05
    if spec.organ_pet_uptake:
        pet[bright] = spec.organ_pet_uptake
    for region in tumors:
        uptake = max(0.4, rng.normal(spec.pet_tumor_uptake, 0.08))
        pet[region] = np.maximum(pet[region], uptake)
    for region in benign:
        uptake = max(0.15, rng.normal(spec.pet_benign_uptake, 0.06))
        pet[region] = np.maximum(pet[region], uptake)
    ct[mask | hotspots] += spec.ct_tumor_contrast
    pet = gaussian_filter(pet, spec.pet_blur)
    ct = gaussian_filter(ct, 0.6)
    pet += rng.normal(0.0, spec.pet_noise, pet.shape)
    ct += rng.normal(0.0, spec.ct_noise, ct.shape)
    pet *= rng.uniform(*spec.pet_gain_range)

    if not mask.any():
        # fallback: a small guaranteed central tumor
        region = _ellipse(h, w, h / 2, w / 2, 3, 3) & body
        mask |= region
        pet[region] = np.maximum(pet[region], spec.pet_tumor_uptake)

    def pack(a, dtype=np.float32):
        return np.ascontiguousarray(a, dtype=dtype).reshape(1, 1, h, w)

    return PhantomSlice(
        pet=pack(pet),
        ct=pack(ct),
        mask=pack(mask.astype(np.float32)),
        patient_id=pid,
        slice_index=sidx,
        hotspot_mask=pack(hotspots.astype(np.float32)),
    )


# ---------------------------------------------------------------------------
# persistence

def _slice_files(s):
    base = f"{s.patient_id}_{s.slice_index:03d}"
    return f"{base}_pet.raw", f"{base}_ct.raw", f"{base}_mask.raw"


def _slice_bytes(s):
    pet = np.ascontiguousarray(s.pet, dtype="<f4").tobytes()
    ct = np.ascontiguousarray(s.ct, dtype="<f4").tobytes()
    mask = np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes()
    return pet, ct, mask


def generate_phantoms(spec, out_dir):
    """Generate and persist a phantom dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in generate_slices(spec):
        pet_b, ct_b, mask_b = _slice_bytes(s)
        pet_f, ct_f, mask_f = _slice_files(s)
        (out_dir / pet_f).write_bytes(pet_b)
        (out_dir / ct_f).write_bytes(ct_b)
        (out_dir / mask_f).write_bytes(mask_b)
        records.append({
            "patient_id": s.patient_id,
            "slice_index": s.slice_index,
            "pet_file": pet_f,
            "ct_file": ct_f,
            "mask_file": mask_f,
            "checksum": zlib.crc32(pet_b + ct_b + mask_b),
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "size": list(spec.size),
        "slices": records,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path):
    """Load a dataset directory; returns {patient_id: [SliceTriplet, ...]}.

    Validates shapes, binary masks, and per-slice checksums; errors name
    the offending slice or file.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(
            f"{manifest_path}: unsupported schema version {manifest.get('schema_version')}"
        )
    h, w = manifest["size"]
    root = manifest_path.parent
    by_patient = {}
    for rec in manifest["slices"]:
        label = f"{rec['patient_id']} slice {rec['slice_index']}"
        raws = []
        for key in ("pet_file", "ct_file", "mask_file"):
            fp = root / rec[key]
            if not fp.exists():
                raise DatasetError(f"{label}: missing file {fp}")
            raws.append(fp.read_bytes())
        if zlib.crc32(raws[0] + raws[1] + raws[2]) != rec["checksum"]:
            raise DatasetError(f"{label}: checksum mismatch")
        for key, raw, itemsize in (("pet_file", raws[0], 4), ("ct_file", raws[1], 4), ("mask_file", raws[2], 1)):
            if len(raw) != h * w * itemsize:
                raise DatasetError(f"{label}: {rec[key]} has wrong size {len(raw)}")
        pet = np.frombuffer(raws[0], "<f4").astype(np.float32).reshape(1, 1, h, w)
        ct = np.frombuffer(raws[1], "<f4").astype(np.float32).reshape(1, 1, h, w)
        mask_u8 = np.frombuffer(raws[2], np.uint8)
        if not np.isin(mask_u8, (0, 1)).all():
            raise DatasetError(f"{label}: mask contains values outside {{0,1}}")
        mask = mask_u8.astype(np.float32).reshape(1, 1, h, w)
        by_patient.setdefault(rec["patient_id"], []).append(
            SliceTriplet(pet, ct, mask, rec["patient_id"], rec["slice_index"])
        )
    for slices in by_patient.values():
        slices.sort(key=lambda s: s.slice_index)
    return dict(sorted(by_patient.items()))


# ---------------------------------------------------------------------------
# protocol pieces

def make_folds(patient_ids, k=5, seed=0):
    """Seeded shuffle + contiguous partition into k patient-disjoint folds."""
    ids = list(patient_ids)
    if k < 1 or k > len(ids):
        raise ValueError(f"cannot split {len(ids)} patients into {k} folds")
    order = list(ids)
    stream(seed, "folds").shuffle(order)
    n = len(order)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds = []
    pos = 0
    for i, size in enumerate(sizes):
        test = tuple(order[pos:pos + size])
        train = tuple(x for x in order if x not in test)
        folds.append(FoldSplit(i, train, test))
        pos += size
    return folds


def filter_tumor_slices(triplets):
    """Keep only slices whose mask contains at least one tumor pixel."""
    return [t for t in triplets if t.mask.sum() > 0]


def compute_stats(triplets, modality):
    """Per-modality mean and population std over all training-fold pixels."""
    if not triplets:
        raise ValueError("cannot compute statistics over an empty training set")
    if modality not in ("pet", "ct"):
        raise ValueError(f"unknown modality {modality!r}")
    pixels = np.concatenate([getattr(t, modality).reshape(-1) for t in triplets])
    mean = float(pixels.mean(dtype=np.float64))
    std = float(pixels.std(dtype=np.float64))
    return NormalizationStats(modality, mean, max(std, STD_FLOOR))


def normalize(image, stats):
    """(x - mean) / std; never applied to masks."""
    return ((image - stats.mean) / stats.std).astype(np.float32)


AUGMENT_NAMES = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def _apply_transform(a, name):
    if name == "identity":
        return a.copy()
    if name == "hflip":
        return np.ascontiguousarray(a[:, :, :, ::-1])
    if name == "vflip":
        return np.ascontiguousarray(a[:, :, ::-1, :])
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
    return np.ascontiguousarray(np.rot90(a, k, axes=(2, 3)))


def augment(triplet, rng):
    """One transform drawn uniformly from flips/rotations/identity, applied
    identically to PET, CT, and mask.  Rotations need square slices."""
    name = AUGMENT_NAMES[int(rng.integers(len(AUGMENT_NAMES)))]
    if name.startswith("rot") and triplet.pet.shape[2] != triplet.pet.shape[3]:
        raise ValueError("rotation augmentation requires square slices")
    return SliceTriplet(
        pet=_apply_transform(triplet.pet, name),
        ct=_apply_transform(triplet.ct, name),
        mask=_apply_transform(triplet.mask, name),
        patient_id=triplet.patient_id,
        slice_index=triplet.slice_index,
    )
