"""Synthetic multi-site brain phantoms with ground-truth tissue labels.

An anatomy is a set of nested, smoothly warped ellipsoids (head, brain,
white matter, ventricles, one lesion). A :class:`SiteProfile` renders the
canonical anatomy the way one scanner would: a monotone tissue-contrast
curve, a gamma curve, a smooth multiplicative bias field and additive noise.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import NormalizationRecord, Volume, read_volume, write_volume

DEFAULT_EDGE = 64


class Tissue(enum.IntEnum):
    BACKGROUND = 0
    CSF = 1
    GM = 2
    WM = 3
    LESION = 4


CANONICAL_LEVELS = {
    Tissue.BACKGROUND: 0.0,
    Tissue.CSF: 0.2,
    Tissue.LESION: 0.35,
    Tissue.GM: 0.55,
    Tissue.WM: 0.85,
}


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    tissue: Tissue


@dataclass(frozen=True)
class PhantomAnatomy:
    """Structures are painted in list order, later ones overwriting earlier."""

    seed: int
    structures: tuple[Ellipsoid, ...]
    deformation: float
    edge: int = DEFAULT_EDGE


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.int8, order="C")
        if arr.ndim != 3:
            raise ValueError(f"label map must be 3-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def count(self, tissue: int) -> int:
        return int(np.count_nonzero(self.labels == tissue))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.labels, other.labels)

    def to_volume(self, site_id: str = "labels") -> Volume:
        return Volume(self.labels.astype(np.float32), self.spacing, site_id)

    @classmethod
    def from_volume(cls, volume: Volume) -> "LabelMap":
        values = volume.data
        if not np.array_equal(values, np.round(values)):
            raise ValueError("label volume holds non-integer values")
        return cls(values.astype(np.int8), volume.spacing)


# -- anatomy -----------------------------------------------------------------
def sample_anatomy(seed: int, edge: int = DEFAULT_EDGE, deformation: float = 2.0) -> PhantomAnatomy:
    """Draw a random anatomy description, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    c = edge / 2 - 0.5
    center = tuple(c + rng.uniform(-1.0, 1.0, 3))
    head = np.array([rng.uniform(0.40, 0.45), rng.uniform(0.41, 0.46), rng.uniform(0.37, 0.42)]) * edge
    brain = head * rng.uniform(0.83, 0.88, 3)
    wm = brain * rng.uniform(0.62, 0.70, 3)
    structures = [
        Ellipsoid(center, tuple(head), Tissue.CSF),
        Ellipsoid(center, tuple(brain), Tissue.GM),
        Ellipsoid(center, tuple(wm), Tissue.WM),
    ]
    # paired ventricles either side of the midline (x axis)
    spread = wm[2] * rng.uniform(0.22, 0.30)
    vent_r = tuple(wm * np.array([0.32, 0.45, 0.14]) * rng.uniform(0.85, 1.15))
    for side in (-1, 1):
        vc = (center[0] + wm[0] * 0.1, center[1], center[2] + side * spread)
        structures.append(Ellipsoid(vc, vent_r, Tissue.CSF))
    # one lesion somewhere inside the brain, away from the outer surface
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    lesion_r = rng.uniform(0.05, 0.09) * edge
    offset = direction * rng.uniform(0.15, 0.55) * brain
    lc = tuple(np.asarray(center) + offset)
    structures.append(Ellipsoid(lc, (lesion_r,) * 3, Tissue.LESION))
    return PhantomAnatomy(seed, tuple(structures), deformation, edge)


def _warp_field(rng: np.random.Generator, edge: int, amplitude: float) -> np.ndarray:
    """Smooth displacement field (3, edge, edge, edge), max magnitude ~ amplitude."""
    fields = []
    for _ in range(3):
        noise = ndimage.gaussian_filter(rng.normal(size=(edge,) * 3), sigma=edge / 8, mode="wrap")
        peak = np.abs(noise).max()
        fields.append(noise / peak * amplitude if peak > 0 else noise)
    return np.stack(fields)


def rasterize(anatomy: PhantomAnatomy) -> np.ndarray:
    edge = anatomy.edge
    grid = np.stack(np.meshgrid(*(np.arange(edge, dtype=np.float64),) * 3, indexing="ij"))
    if anatomy.deformation > 0:
        rng = np.random.default_rng([anatomy.seed, 7])
        grid = grid + _warp_field(rng, edge, anatomy.deformation)
    labels = np.zeros((edge,) * 3, dtype=np.int8)
    for s in anatomy.structures:
        d = sum(((grid[k] - s.center[k]) / s.radii[k]) ** 2 for k in range(3))
        labels[d <= 1.0] = s.tissue
    return labels


def generate_anatomy(
    seed: int, edge: int = DEFAULT_EDGE, deformation: float = 2.0
) -> tuple[Volume, LabelMap]:
    """Canonical-contrast volume and its label map for one subject."""
    labels = rasterize(sample_anatomy(seed, edge, deformation))
    lut = np.zeros(len(Tissue), dtype=np.float32)
    for tissue, level in CANONICAL_LEVELS.items():
        lut[tissue] = level
    canonical = Volume(lut[labels], site_id="canonical", norm=NormalizationRecord(0.0, 1.0))
    return canonical, LabelMap(labels)


# -- site rendering ---------------------------------------------------------------
def _bias_basis(edge: int) -> list[np.ndarray]:
    """Centred monomials of degree 1 and 2 on [-1, 1]^3 (each within [-1, 1])."""
    u = np.linspace(-1.0, 1.0, edge)
    z, y, x = np.meshgrid(u, u, u, indexing="ij")
    sq = lambda a: 1.5 * (a * a - 1.0 / 3.0)
    return [z, y, x, z * y, z * x, y * x, sq(z), sq(y), sq(x)]


@dataclass(frozen=True)
class SiteProfile:
    """Parametric appearance of one acquisition site.

    ``tissue_levels`` maps canonical tissue levels to this site's levels via a
    piecewise-linear curve through (0, 0), the tissue knots and (1, 1).
    ``bias_coeffs`` weight the nine centred monomials of :func:`_bias_basis`.
    """

    site_id: str
    tissue_levels: dict = field(default_factory=dict)
    gamma: float = 1.0
    bias_coeffs: tuple[float, ...] = ()
    noise_sigma: float = 0.0
    global_scale: float = 1.0
    global_offset: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.global_scale <= 0:
            raise ValueError(f"global_scale must be > 0, got {self.global_scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.bias_coeffs) > 9:
            raise ValueError("at most 9 bias coefficients")
        # max |basis| is 1, so this keeps the bias field strictly positive
        if sum(abs(c) for c in self.bias_coeffs) >= 0.9:
            raise ValueError("bias coefficients too large; field could reach zero")
        xs, ys = self.curve_knots()
        if np.any(np.diff(ys) <= 0):
            raise ValueError(f"site {self.site_id!r}: tissue curve is not strictly monotone")

    def curve_knots(self) -> tuple[np.ndarray, np.ndarray]:
        pts = {0.0: 0.0, 1.0: 1.0}
        for tissue, level in self.tissue_levels.items():
            x = CANONICAL_LEVELS[Tissue(tissue)]
            if x in (0.0, 1.0):
                if level != pts[x]:
                    raise ValueError("background level is fixed at 0")
                continue
            pts[x] = float(level)
        xs = np.array(sorted(pts))
        return xs, np.array([pts[x] for x in xs])

    def bias_field(self, dims: tuple[int, int, int]) -> np.ndarray:
        if not self.bias_coeffs:
            return np.ones(dims)
        if len(set(dims)) != 1:
            raise ValueError("bias field needs a cubic volume")
        basis = _bias_basis(dims[0])
        field_ = 1.0 + sum(c * b for c, b in zip(self.bias_coeffs, basis))
        return field_ / field_.mean()

    def intensity_curve(self, v: np.ndarray) -> np.ndarray:
        """Noise- and bias-free intensity transform (strictly monotone)."""
        xs, ys = self.curve_knots()
        return self.global_scale * np.interp(v, xs, ys) ** self.gamma + self.global_offset


def identity_profile(site_id: str = "identity") -> SiteProfile:
    return SiteProfile(site_id)


def apply_site_profile(canonical: Volume, profile: SiteProfile, noise_seed: int) -> Volume:
    """Render a canonical volume with a site's contrast, bias field and noise."""
    if canonical.norm is None:
        raise ValueError("canonical volume must be normalized to [0, 1]")
    v = canonical.data.astype(np.float64)
    xs, ys = profile.curve_knots()
    shaped = np.interp(v, xs, ys) ** profile.gamma
    out = profile.global_scale * profile.bias_field(canonical.dims) * shaped + profile.global_offset
    if profile.noise_sigma > 0:
        out = out + np.random.default_rng(noise_seed).normal(0.0, profile.noise_sigma, v.shape)
    return Volume(np.clip(out, 0.0, 1.0), canonical.spacing, profile.site_id)


# Three scanners loosely themed on a GE / Siemens / Philips split. The values
# are fixtures that make the harmonization task non-trivial, nothing more.
DEFAULT_PROFILES = (
    SiteProfile(
        "A",
        {Tissue.CSF: 0.10, Tissue.LESION: 0.22, Tissue.GM: 0.36, Tissue.WM: 0.84},
        gamma=1.0,
        bias_coeffs=(0.05, 0.0, 0.04, 0.0, 0.0, 0.03),
        noise_sigma=0.006,
    ),
    SiteProfile(
        "B",
        {Tissue.CSF: 0.18, Tissue.LESION: 0.46, Tissue.GM: 0.72, Tissue.WM: 0.95},
        gamma=1.0,
        bias_coeffs=(0.0, -0.06, 0.0, 0.0, 0.04, 0.0, 0.03),
        noise_sigma=0.005,
    ),
    SiteProfile(
        "C",
        {Tissue.CSF: 0.18, Tissue.LESION: 0.28, Tissue.GM: 0.50, Tissue.WM: 0.92},
        gamma=0.9,
        bias_coeffs=(0.03, 0.03, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.06),
        noise_sigma=0.008,
    ),
)


# -- datasets --------------------------------------------------------------------
@dataclass(frozen=True)
class ManifestEntry:
    site_id: str
    subject_seed: int
    volume_path: str
    labels_path: str

    def load(self, root: str | os.PathLike = ".") -> tuple[Volume, LabelMap]:
        root = Path(root)
        return read_volume(root / self.volume_path), LabelMap.from_volume(read_volume(root / self.labels_path))


MANIFEST_NAME = "manifest.tsv"


def subject_seed(master_seed: int, site_index: int, subject_index: int) -> int:
    """Independent per-subject seed, so generation order does not matter."""
    return int(np.random.SeedSequence([master_seed, site_index, subject_index]).generate_state(1)[0])


def generate_dataset(
    n_per_site: int,
    profiles=DEFAULT_PROFILES,
    out_dir: str | os.PathLike = "data",
    master_seed: int = 0,
    edge: int = DEFAULT_EDGE,
) -> list[ManifestEntry]:
    """Write ``n_per_site`` rendered subjects per site plus labels and a manifest.

    Every subject has its own anatomy seed, so no subject appears at two sites.
    Paths in the manifest are relative to ``out_dir``.
    """
    if n_per_site < 1:
        raise ValueError(f"n_per_site must be >= 1, got {n_per_site}")
    ids = [p.site_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError(f"site ids must be unique, got {ids}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    entries = []
    for si, profile in enumerate(profiles):
        for j in range(n_per_site):
            seed = subject_seed(master_seed, si, j)
            canonical, labels = generate_anatomy(seed, edge)
            rendered = apply_site_profile(canonical, profile, noise_seed=seed ^ 0x5EED)
            stem = f"{profile.site_id}_{j:03d}"
            write_volume(rendered, out / f"{stem}.hvol")
            write_volume(labels.to_volume(), out / f"{stem}_labels.hvol")
            entries.append(ManifestEntry(profile.site_id, seed, f"{stem}.hvol", f"{stem}_labels.hvol"))
    write_manifest(entries, out / MANIFEST_NAME)
    return entries


def write_manifest(entries, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.site_id}\t{e.subject_seed}\t{e.volume_path}\t{e.labels_path}\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2], parts[3]))
    return entries
