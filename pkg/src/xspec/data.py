"""Records, manifests, synthetic multi-domain data, SIE indexing, PK sampling, IoU labels.

Manifest format (comma separated, header row required)::

    # n_ids=8
    # n_domains=2
    # n_cameras=2
    # domain_names=VIS;IR
    path,identity,domain,camera,range
    images/000000.npy,0,0,0,none

``# key=value`` lines before the header declare label bounds; other ``#``
lines are comments. ``domain`` may be an index or a declared name, ``camera``
may be empty, ``range`` is one of ``short``, ``long``, ``none`` (or empty).
Image blobs are ``.npy`` arrays of shape ``h x w x c`` with values in [0, 1],
resolved relative to the manifest's directory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ManifestError, SamplerError, SchemeError

HEADER = "path,identity,domain,camera,range"
RANGE_TAGS = ("short", "long", "none")
LLCM_DOMAINS = ("VIS", "IR")
MDF_DOMAINS = ("VIS", "SWIR", "MWIR", "LWIR")


@dataclass
class ImageRecord:
    identity: int
    domain: int
    camera: Optional[int] = None
    range_tag: str = "none"
    path: Optional[str] = None
    pixels: Optional[np.ndarray] = field(default=None, repr=False)
    root: Optional[Path] = field(default=None, repr=False, compare=False)

    def load(self):
        """Pixels, reading the blob on first access."""
        if self.pixels is None:
            if self.path is None:
                raise ManifestError("record has neither pixels nor a path")
            src = Path(self.path)
            if self.root is not None and not src.is_absolute():
                src = self.root / src
            arr = np.load(src)
            if arr.ndim != 3:
                raise ManifestError(f"{src}: expected an h x w x c array, got shape {arr.shape}")
            arr = arr.astype(np.float64)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ManifestError(f"{src}: pixel values outside [0, 1]")
            self.pixels = arr
        return self.pixels


@dataclass
class Dataset:
    records: list
    n_ids: int
    n_domains: int
    n_cameras: int = 1
    domain_names: tuple = ()
    _cells: dict = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def domain_name(self, d):
        return self.domain_names[d] if d < len(self.domain_names) else str(d)

    def cells(self):
        """``{(identity, domain): int array of record indices}``."""
        if self._cells is None:
            cells = {}
            for k, r in enumerate(self.records):
                cells.setdefault((r.identity, r.domain), []).append(k)
            self._cells = {key: np.asarray(v, dtype=np.int64) for key, v in cells.items()}
        return self._cells

    def identities(self):
        return sorted({r.identity for r in self.records})


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _int_field(text, what, lineno):
    try:
        return int(text)
    except ValueError:
        raise ManifestError(f"{what} {text!r} is not an integer", lineno) from None


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    declared = {}
    records = []
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if not header_seen and "=" in body:
                key, _, value = body.partition("=")
                declared[key.strip()] = value.strip()
            continue
        if not header_seen:
            if line.replace(" ", "") != HEADER:
                raise ManifestError(f"expected header {HEADER!r}, got {line!r}", lineno)
            header_seen = True
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ManifestError(f"expected 5 fields, got {len(parts)}", lineno)
        rel, ident, dom, cam, rng_tag = parts
        if not rel:
            raise ManifestError("empty path", lineno)
        records.append((lineno, rel, ident, dom, cam, rng_tag))
    if not header_seen:
        raise ManifestError(f"{path}: missing header row {HEADER!r}")

    names = tuple(n for n in declared.get("domain_names", "").split(";") if n)
    out = []
    for lineno, rel, ident, dom, cam, rng_tag in records:
        identity = _int_field(ident, "identity", lineno)
        if dom in names:
            domain = names.index(dom)
        else:
            domain = _int_field(dom, "domain", lineno)
        camera = None if cam == "" else _int_field(cam, "camera", lineno)
        tag = rng_tag.lower() or "none"
        if tag not in RANGE_TAGS:
            raise ManifestError(f"range {rng_tag!r} not one of {RANGE_TAGS}", lineno)
        out.append((lineno, ImageRecord(identity, domain, camera, tag, rel, root=path.parent)))

    def bound(key, values):
        if key in declared:
            return _int_field(declared[key], key, None)
        return max(values, default=-1) + 1

    n_ids = bound("n_ids", [r.identity for _, r in out])
    n_domains = bound("n_domains", [r.domain for _, r in out])
    if names and "n_domains" not in declared:
        n_domains = max(n_domains, len(names))
    n_cameras = bound("n_cameras", [r.camera for _, r in out if r.camera is not None])
    for lineno, r in out:
        if not 0 <= r.identity < n_ids:
            raise ManifestError(f"identity {r.identity} outside [0, {n_ids})", lineno)
        if not 0 <= r.domain < n_domains:
            raise ManifestError(f"domain {r.domain} outside [0, {n_domains})", lineno)
        if r.camera is not None and not 0 <= r.camera < n_cameras:
            raise ManifestError(f"camera {r.camera} outside [0, {n_cameras})", lineno)
    return Dataset([r for _, r in out], n_ids, n_domains, max(n_cameras, 1), names)


def export_dataset(dataset: Dataset, out_dir, manifest_name="manifest.csv"):
    """Write ``images/NNNNNN.npy`` blobs and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = [f"# n_ids={dataset.n_ids}", f"# n_domains={dataset.n_domains}", f"# n_cameras={dataset.n_cameras}"]
    if dataset.domain_names:
        lines.append("# domain_names=" + ";".join(dataset.domain_names))
    lines.append(HEADER)
    for k, r in enumerate(dataset.records):
        rel = f"images/{k:06d}.npy"
        np.save(out_dir / rel, np.ascontiguousarray(r.load(), dtype=np.float64))
        cam = "" if r.camera is None else str(r.camera)
        lines.append(f"{rel},{r.identity},{r.domain},{cam},{r.range_tag}")
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    image_h: int = 64
    image_w: int = 32
    channels: int = 3
    n_cameras: int = 2
    cell: int = 8          # side of the constant-colour blocks in an identity pattern
    palette: float = 0.6   # weight of the identity's dominant colour against its block pattern
    chroma: float = 1.0    # 0 makes identity patterns grey (channel-permutation invariant), 1 fully coloured
    noise: float = 0.04
    jitter: int = 1        # max per-image translation in pixels
    domain_mix: float = 0.35
    gamma_range: tuple = (0.4, 2.5)  # contrast-curve exponent range for non-reference domains
    ranges: bool = False   # alternate short/long range tags; long range is blurred


def _upsample(grid, cell):
    return np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)


def synth_generate(n_ids, domains, per_domain, seed, config: SynthConfig = SynthConfig(), noise_seed=None) -> Dataset:
    """Deterministic multi-domain dataset.

    Identity patterns and domain transforms come from ``seed``; per-image
    noise and jitter come from ``noise_seed`` (defaults to ``seed``), so a
    second draw with another ``noise_seed`` is a held-out set of the same
    identities.
    """
    if n_ids < 2:
        raise ValueError(f"n_ids must be at least 2, got {n_ids}")
    if domains < 2:
        raise ValueError(f"domains must be at least 2, got {domains}")
    if per_domain < 1:
        raise ValueError(f"per_domain must be positive, got {per_domain}")
    cfg = config
    h, w, c = cfg.image_h, cfg.image_w, cfg.channels
    gh, gw = math.ceil(h / cfg.cell), math.ceil(w / cfg.cell)
    id_rng = np.random.default_rng([seed, 0])
    patterns = []
    for _ in range(n_ids):
        colour = id_rng.uniform(0.0, 1.0, size=c)
        grid = id_rng.uniform(0.0, 1.0, size=(gh, gw, c))
        colour = cfg.chroma * colour + (1.0 - cfg.chroma) * colour.mean()
        grid = cfg.chroma * grid + (1.0 - cfg.chroma) * grid.mean(axis=-1, keepdims=True)
        blocks = _upsample(grid, cfg.cell)[:h, :w]
        patterns.append(cfg.palette * colour + (1.0 - cfg.palette) * blocks)

    dom_rng = np.random.default_rng([seed, 1])
    transforms = []
    for d in range(domains):
        perm = np.arange(c) if d == 0 else dom_rng.permutation(c)
        if d > 0 and c > 1 and (perm == np.arange(c)).all():
            perm = np.roll(perm, 1)
        gamma = 1.0 if d == 0 else float(dom_rng.uniform(*cfg.gamma_range))
        mix = 0.0 if d == 0 else cfg.domain_mix
        overlay = _upsample(dom_rng.uniform(0.0, 1.0, size=(gh, gw, c)), cfg.cell)[:h, :w]
        transforms.append((perm, gamma, mix, overlay))

    img_rng = np.random.default_rng([seed if noise_seed is None else noise_seed, 2])
    names = LLCM_DOMAINS if domains == 2 else (MDF_DOMAINS if domains == 4 else ())
    records = []
    for i in range(n_ids):
        for d in range(domains):
            perm, gamma, mix, overlay = transforms[d]
            base = (1.0 - mix) * np.power(patterns[i][..., perm], gamma) + mix * overlay
            for j in range(per_domain):
                dy, dx = img_rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
                img = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
                tag = "none"
                if cfg.ranges:
                    tag = "short" if j % 2 == 0 else "long"
                    if tag == "long":
                        img = _blur2(img)
                img = np.clip(img + img_rng.normal(0.0, cfg.noise, size=img.shape), 0.0, 1.0)
                records.append(ImageRecord(i, d, j % cfg.n_cameras, tag, None, img))
    return Dataset(records, n_ids, domains, cfg.n_cameras, names)


def _blur2(img):
    h, w, c = img.shape
    hh, ww = h - h % 2, w - w % 2
    small = img[:hh, :ww].reshape(hh // 2, 2, ww // 2, 2, c).mean(axis=(1, 3))
    out = img.copy()
    out[:hh, :ww] = _upsample(small, 2)
    return out


# ---------------------------------------------------------------------------
# side-information indices
# ---------------------------------------------------------------------------

SIE_MODES = ("domain", "camera", "domain+camera", "domain+range")
_MODE_ALIASES = {"domain-only": "domain", "camera-only": "camera", "domain-camera": "domain+camera",
                 "domain-range": "domain+range"}


@dataclass(frozen=True)
class SieScheme:
    """How a record's metadata selects a row of the SIE table.

    LLCM: ``domain`` -> SIE-2, ``camera`` -> SIE-9, ``domain+camera`` -> SIE-18.
    IJB-MDF: ``domain`` -> SIE-4, ``domain+range`` -> SIE-8.
    """
    mode: str
    n_domains: int
    n_cameras: int = 1

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.mode, self.mode)
        if mode not in SIE_MODES:
            raise SchemeError(f"unknown SIE mode {self.mode!r}; expected one of {SIE_MODES}")
        object.__setattr__(self, "mode", mode)

    @property
    def table_size(self):
        if self.mode == "domain":
            return self.n_domains
        if self.mode == "camera":
            return self.n_cameras
        if self.mode == "domain+camera":
            return self.n_domains * self.n_cameras
        return 2 * self.n_domains

    @classmethod
    def for_dataset(cls, mode, dataset: Dataset):
        return cls(mode, dataset.n_domains, dataset.n_cameras)


def assign_sie_index(record: ImageRecord, scheme: SieScheme) -> int:
    mode = scheme.mode
    if not 0 <= record.domain < scheme.n_domains:
        raise SchemeError(f"domain {record.domain} outside scheme's {scheme.n_domains} domains")
    if mode == "domain":
        return record.domain
    if mode in ("camera", "domain+camera"):
        if record.camera is None:
            raise SchemeError(f"{mode} scheme needs a camera index but the record has none")
        if not 0 <= record.camera < scheme.n_cameras:
            raise SchemeError(f"camera {record.camera} outside scheme's {scheme.n_cameras} cameras")
        if mode == "camera":
            return record.camera
        return record.domain * scheme.n_cameras + record.camera
    if record.range_tag not in ("short", "long"):
        raise SchemeError(f"domain+range scheme needs a short/long range tag, got {record.range_tag!r}")
    block = 0 if record.range_tag == "short" else 1
    return block * scheme.n_domains + record.domain


# ---------------------------------------------------------------------------
# PK sampling
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    entries: list           # (identity, domain, record index)
    P: int
    K_batch: int
    N_D: int

    def __len__(self):
        return len(self.entries)

    @property
    def record_indices(self):
        return np.array([e[2] for e in self.entries], dtype=np.int64)

    @property
    def labels(self):
        return np.array([e[0] for e in self.entries], dtype=np.int64)

    def counts(self):
        out = {}
        for ident, dom, _ in self.entries:
            out[(ident, dom)] = out.get((ident, dom), 0) + 1
        return out

    def is_valid(self):
        ids = {e[0] for e in self.entries}
        per = self.K_batch // self.N_D
        counts = self.counts()
        return (len(ids) == self.P and len(self.entries) == self.P * self.K_batch
                and all(counts.get((i, d), 0) == per for i in ids for d in range(self.N_D)))


def _draw(rng, pool, n):
    # short cells are resampled with replacement
    return rng.choice(pool, size=n, replace=len(pool) < n)


def sample_batch(dataset: Dataset, P, K_batch, N_D, rng, pair_ranges=False) -> BatchPlan:
    """P identities without replacement, ``K_batch / N_D`` records per domain each.

    With ``pair_ranges`` each (identity, domain) cell contributes equal numbers
    of short- and long-range records.
    """
    if N_D < 1 or K_batch < 1 or P < 1:
        raise SamplerError(f"P, K_batch and N_D must be positive (got {P}, {K_batch}, {N_D})")
    if K_batch % N_D:
        raise SamplerError(f"K_batch={K_batch} not divisible by N_D={N_D}")
    per = K_batch // N_D
    if pair_ranges and per % 2:
        raise SamplerError(f"range pairing needs an even per-domain count, got {per}")
    if dataset.n_domains != N_D:
        raise SamplerError(f"dataset has {dataset.n_domains} domains, sampler expects N_D={N_D}")
    cells = dataset.cells()
    eligible = [i for i in dataset.identities() if all((i, d) in cells for d in range(N_D))]
    if P > len(eligible):
        raise SamplerError(f"P={P} exceeds the {len(eligible)} identities present in every domain")
    chosen = rng.choice(np.asarray(eligible, dtype=np.int64), size=P, replace=False)
    entries = []
    for ident in chosen.tolist():
        for d in range(N_D):
            pool = cells[(ident, d)]
            if pair_ranges:
                picks = []
                for tag in ("short", "long"):
                    sub = pool[[dataset.records[k].range_tag == tag for k in pool]]
                    if sub.size == 0:
                        raise SamplerError(f"identity {ident} has no {tag}-range record in domain {d}")
                    picks.extend(_draw(rng, sub, per // 2).tolist())
            else:
                picks = _draw(rng, pool, per).tolist()
            entries.extend((ident, d, int(k)) for k in picks)
    return BatchPlan(entries, P, K_batch, N_D)


def batches_per_epoch(n_records, P, K_batch):
    return max(1, math.ceil(n_records / (P * K_batch)))


# ---------------------------------------------------------------------------
# IoU identity labelling
# ---------------------------------------------------------------------------

class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)  # rounding can push identical boxes past 1


class IouLabel(NamedTuple):
    status: str             # "match", "discard" or "no-match"
    identity: Optional[int]
    ambiguous: bool = False


def assign_identity_by_iou(body: BBox, faces: Sequence, threshold=0.75) -> IouLabel:
    """Label a body detection with the identity of its max-IoU face box.

    Detections overlapping more than one face above ``threshold`` are
    discarded. Equal maxima resolve to the lowest identity and set
    ``ambiguous``.
    """
    if not faces:
        return IouLabel("no-match", None)
    scores = [iou(body, box) for box, _ in faces]
    if sum(s > threshold for s in scores) >= 2:
        return IouLabel("discard", None)
    best = max(scores)
    if best <= 0.0:
        return IouLabel("no-match", None)
    tied = [ident for (_, ident), s in zip(faces, scores) if s == best]
    return IouLabel("match", min(tied), len(tied) > 1)
