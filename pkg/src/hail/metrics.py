"""Harmonization metrics: histogram Wasserstein distance, nWD and rAVD.

Intensity harmonization is scored by how far the prediction's histogram
moved away from the input and towards the target, both normalized by the
input-target distance. Anatomy preservation is scored by the relative
volume change of grey/white-matter segmentations between input and
prediction, using a two-threshold Otsu segmenter as the stand-in for a
learned brain segmentation model.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .phantom import LabelMap, Tissue
from .volume import Volume

DEFAULT_BINS = 256
FOREGROUND_THRESHOLD = 0.01
SEGMENT_THRESHOLD = 0.05
WD_FLOOR = 1e-9

BACKGROUND, GM, WM = int(Tissue.BACKGROUND), int(Tissue.GM), int(Tissue.WM)
STRUCTURES = {"GM": GM, "WM": WM}


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    bins: int = DEFAULT_BINS
    lo: float = 0.0
    hi: float = 1.0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.bins

    def normalized(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def histogram(volume: Volume | np.ndarray, mask: np.ndarray | None = None, bins: int = DEFAULT_BINS) -> Histogram:
    """Equal-width histogram over [0, 1] of the masked voxels.

    A value of exactly 1.0 lands in the last bin.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    values = data.reshape(-1) if mask is None else data[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        raise ValueError("histogram mask selects no voxels")
    idx = np.floor(np.clip(values.astype(np.float64), 0.0, 1.0) * bins).astype(np.int64)
    np.minimum(idx, bins - 1, out=idx)
    return Histogram(np.bincount(idx, minlength=bins), bins)


def wasserstein_1d(h1: Histogram, h2: Histogram) -> float:
    """W1 distance: L1 distance between the two CDFs times the bin width."""
    if (h1.bins, h1.lo, h1.hi) != (h2.bins, h2.lo, h2.hi):
        raise ValueError(f"histogram binning differs: {h1.bins} vs {h2.bins} bins")
    cdf1 = np.cumsum(h1.normalized())
    cdf2 = np.cumsum(h2.normalized())
    return float(np.abs(cdf1 - cdf2).sum() * h1.bin_width)


def foreground_mask(volume: Volume, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    return volume.data > threshold


def _mask_for(policy: str, i: Volume) -> np.ndarray | None:
    if policy == "foreground":
        return foreground_mask(i)
    if policy == "all":
        return None
    raise ValueError(f"unknown mask policy {policy!r} (expected 'foreground' or 'all')")


@dataclass(frozen=True)
class WDTriple:
    wd_it: float
    wd_ip: float
    wd_tp: float

    @property
    def nwd_ip(self) -> float:
        return 100.0 * self.wd_ip / self.wd_it if self.wd_it >= WD_FLOOR else math.nan

    @property
    def nwd_tp(self) -> float:
        return 100.0 * self.wd_tp / self.wd_it if self.wd_it >= WD_FLOOR else math.nan


def wd_triple(
    i: Volume, t: Volume, p: Volume, mask_policy: str = "foreground", bins: int = DEFAULT_BINS
) -> WDTriple:
    """Pairwise WDs of input, target and prediction under one shared mask
    (derived from the input)."""
    if not (i.dims == t.dims == p.dims):
        raise ValueError(f"dims differ: {i.dims}, {t.dims}, {p.dims}")
    mask = _mask_for(mask_policy, i)
    hi, ht, hp = (histogram(v, mask, bins) for v in (i, t, p))
    return WDTriple(wasserstein_1d(hi, ht), wasserstein_1d(hi, hp), wasserstein_1d(ht, hp))


def nwd(
    i: Volume, t: Volume, p: Volume, mask_policy: str = "foreground", bins: int = DEFAULT_BINS
) -> tuple[float, float]:
    """(nWD(i,p)%, nWD(t,p)%); both NaN when input and target histograms coincide."""
    w = wd_triple(i, t, p, mask_policy, bins)
    return w.nwd_ip, w.nwd_tp


# -- proxy segmentation ----------------------------------------------------------
def otsu_two_thresholds(values: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[float, float]:
    """Thresholds maximizing the three-class between-class variance.

    Exhaustive search over histogram bin edges, the classic multi-Otsu
    criterion. Raises ``ValueError`` when the values do not form at least
    three occupied histogram bins.
    """
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    if np.count_nonzero(counts) < 3:
        raise ValueError("degenerate intensity distribution: fewer than three clusters")
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = counts / counts.sum()
    w = np.concatenate([[0.0], np.cumsum(p)])
    m = np.concatenate([[0.0], np.cumsum(p * centers)])
    # class k covers bins [a, b): weight w[b]-w[a], first moment m[b]-m[a]
    a = np.arange(1, bins)[:, None]
    b = np.arange(1, bins)[None, :]
    valid = b > a
    w0, m0 = w[a], m[a]
    w1, m1 = w[b] - w[a], m[b] - m[a]
    w2, m2 = 1.0 - w[b], m[-1] - m[b]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = m0**2 / w0 + m1**2 / w1 + m2**2 / w2
    score = np.where(valid & (w0 > 0) & (w1 > 0) & (w2 > 0), score, -np.inf)
    if not np.isfinite(score).any():
        raise ValueError("degenerate intensity distribution: cannot form three classes")
    ia, ib = np.unravel_index(int(np.argmax(score)), score.shape)
    return float(edges[ia + 1]), float(edges[ib + 1])


def segment_proxy(volume: Volume, foreground_threshold: float = SEGMENT_THRESHOLD) -> LabelMap:
    """Background / GM-like / WM-like segmentation from foreground intensities.

    Foreground voxels below the lower Otsu threshold are labelled background
    (this absorbs CSF-like tissue), the middle class GM and the top class WM.
    The foreground cut sits well above background noise so that noise does
    not form a cluster of its own.
    """
    data = volume.data
    fg = data > foreground_threshold
    if not fg.any():
        raise ValueError("degenerate intensity distribution: empty foreground")
    t1, t2 = otsu_two_thresholds(data[fg])
    labels = np.full(data.shape, BACKGROUND, dtype=np.int8)
    labels[fg & (data >= t1) & (data < t2)] = GM
    labels[fg & (data >= t2)] = WM
    return LabelMap(labels, volume.spacing)


def ravd(seg_i: LabelMap, seg_p: LabelMap, structure: int | str) -> float:
    """Relative absolute volume difference of one structure, in percent."""
    if isinstance(structure, str):
        structure = STRUCTURES[structure]
    if seg_i.dims != seg_p.dims:
        raise ValueError(f"segmentations differ in dims: {seg_i.dims} vs {seg_p.dims}")
    vox_i = float(np.prod(seg_i.spacing))
    vox_p = float(np.prod(seg_p.spacing))
    vol_i = seg_i.count(structure) * vox_i
    vol_p = seg_p.count(structure) * vox_p
    if vol_i == 0:
        raise ValueError(f"structure {structure} is absent from the input segmentation")
    return 100.0 * abs(vol_p - vol_i) / vol_i


# -- reports -------------------------------------------------------------------------
@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    direction: str
    wd_it: float
    wd_ip: float
    wd_tp: float
    nwd_ip_pct: float
    nwd_tp_pct: float
    ravd_gm_pct: float
    ravd_wm_pct: float


METRIC_FIELDS = ("wd_it", "wd_ip", "wd_tp", "nwd_ip_pct", "nwd_tp_pct", "ravd_gm_pct", "ravd_wm_pct")
HEADER = ("case_id", "direction") + METRIC_FIELDS


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)

    def directions(self) -> list[str]:
        seen = []
        for c in self.cases:
            if c.direction not in seen:
                seen.append(c.direction)
        return seen

    def extend(self, other: "MetricsReport") -> None:
        self.cases.extend(other.cases)

    def values(self, metric: str, direction: str | None = None) -> np.ndarray:
        return np.array(
            [getattr(c, metric) for c in self.cases if direction is None or c.direction == direction],
            dtype=np.float64,
        )

    def mean(self, metric: str, direction: str | None = None) -> float:
        return float(np.mean(self.values(metric, direction)))

    def std(self, metric: str, direction: str | None = None) -> float:
        return float(np.std(self.values(metric, direction)))

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        return {
            d: {m: (self.mean(m, d), self.std(m, d)) for m in METRIC_FIELDS} for d in self.directions()
        }

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for c in self.cases:
            w.writerow([c.case_id, c.direction] + [repr(float(getattr(c, m))) for m in METRIC_FIELDS])
        for d in self.directions():
            for stat in ("mean", "std"):
                fn = self.mean if stat == "mean" else self.std
                w.writerow([stat, d] + [repr(fn(m, d)) for m in METRIC_FIELDS])
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != HEADER:
            raise ValueError("metrics report header does not match the expected schema")
        cases = [
            CaseMetrics(r[0], r[1], *(float(x) for x in r[2:]))
            for r in rows[1:]
            if r and r[0] not in ("mean", "std")
        ]
        return cls(cases)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


Harmonizer = Callable[[Volume, Volume], Volume]


def evaluate_direction(
    model: Harmonizer,
    test_inputs: Sequence[tuple[str, Volume]],
    exemplar: Volume,
    direction: str | None = None,
    mask_policy: str = "foreground",
    segmenter: Callable[[Volume], LabelMap] = segment_proxy,
) -> MetricsReport:
    """Harmonize every test input against one exemplar and score it.

    ``model(input, exemplar)`` returns the prediction. ``test_inputs`` holds
    (case_id, normalized volume) pairs from a single site.
    """
    sites = {v.site_id for _, v in test_inputs}
    if exemplar.site_id in sites:
        raise ValueError(f"exemplar site {exemplar.site_id!r} matches the input site")
    if direction is None:
        direction = f"{'/'.join(sorted(sites))}->{exemplar.site_id}"
    report = MetricsReport()
    for case_id, vol in test_inputs:
        pred = model(vol, exemplar)
        w = wd_triple(vol, exemplar, pred, mask_policy)
        seg_i, seg_p = segmenter(vol), segmenter(pred)
        report.cases.append(
            CaseMetrics(
                case_id,
                direction,
                w.wd_it,
                w.wd_ip,
                w.wd_tp,
                w.nwd_ip,
                w.nwd_tp,
                ravd(seg_i, seg_p, GM),
                ravd(seg_i, seg_p, WM),
            )
        )
    return report


def identity_model(volume: Volume, exemplar: Volume) -> Volume:
    return volume
