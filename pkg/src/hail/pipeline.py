"""End-to-end reproduction: data, two-phase training, ablation, evaluation.

Evaluation protocol: for a direction ``X->Y`` the inputs are the test
volumes of site X and the single exemplar is one volume of site Y. Trained
sites draw from their phase-2 test split; the held-out site contributes
all of its volumes, its first volume serving as the exemplar and the rest
as inputs.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import HailConfig
from .metrics import METRIC_FIELDS, MetricsReport, evaluate_direction
from .model import Harmonizer, HailModel
from .phantom import MANIFEST_NAME, ManifestEntry, generate_dataset, read_manifest
from .training import DatasetSplit, VolumeStore, pretrain_phase1, split_dataset, train_phase2
from .volume import Volume

log = logging.getLogger(__name__)

TABLE_METRICS = ("nwd_ip_pct", "nwd_tp_pct", "ravd_gm_pct", "ravd_wm_pct")
TABLE_LABELS = ("nWD(i,p)%", "nWD(t,p)%", "rAVD(GM)%", "rAVD(WM)%")


def parse_direction(text: str) -> tuple[str, str]:
    parts = text.split("->")
    if len(parts) != 2 or not all(p.strip() for p in parts):
        raise ValueError(f"direction {text!r} is not of the form X->Y")
    src, dst = (p.strip() for p in parts)
    if src == dst:
        raise ValueError(f"direction {text!r} maps a site onto itself")
    return src, dst


@dataclass
class EvalProtocol:
    split: DatasetSplit
    store: VolumeStore

    @classmethod
    def from_config(cls, manifest: Sequence[ManifestEntry], data_root, config: HailConfig) -> "EvalProtocol":
        split = split_dataset(
            manifest,
            2,
            config["data.split_seed"],
            config["data.phase2_sites"],
            config["data.held_out_site"],
        )
        return cls(split, VolumeStore(data_root))

    def _pool(self, site: str) -> list[ManifestEntry]:
        if site in self.split.test:
            return self.split.test[site]
        if site in self.split.held_out:
            return self.split.held_out[site]
        raise ValueError(f"site {site!r} has no evaluation volumes")

    def exemplar(self, site: str) -> Volume:
        pool = self._pool(site)
        if not pool:
            raise ValueError(f"site {site!r} has no evaluation volumes")
        return self.store.get(pool[0])

    def inputs(self, site: str) -> list[tuple[str, Volume]]:
        pool = self._pool(site)
        if site in self.split.held_out:
            pool = pool[1:]
        if not pool:
            raise ValueError(f"site {site!r} has no test inputs")
        return [(Path(e.volume_path).stem, self.store.get(e)) for e in pool]

    def evaluate(
        self,
        model: Callable[[Volume, Volume], Volume],
        directions: Sequence[str],
        mask_policy: str = "foreground",
    ) -> MetricsReport:
        report = MetricsReport()
        for d in directions:
            src, dst = parse_direction(d)
            report.extend(
                evaluate_direction(model, self.inputs(src), self.exemplar(dst), f"{src}->{dst}", mask_policy)
            )
        return report


# -- tables ------------------------------------------------------------------------------------
def block_means(report: MetricsReport, directions: Sequence[str]) -> dict[str, float]:
    """Average over directions of the per-direction case means."""
    return {m: float(np.mean([report.mean(m, d) for d in directions])) for m in TABLE_METRICS}


def format_results_table(report: MetricsReport, seen: Sequence[str], unseen: Sequence[str], title: str) -> str:
    def row(label, cells):
        return f"{label:<14}" + "".join(f"{c:>20}" for c in cells)

    lines = [title, row("direction", TABLE_LABELS)]
    for block, dirs in (("SEEN", seen), ("UNSEEN", unseen)):
        present = [d for d in dirs if d in report.directions()]
        if not present:
            continue
        lines.append(block)
        for d in present:
            lines.append(row(d, [f"{report.mean(m, d):.2f} ± {report.std(m, d):.2f}" for m in TABLE_METRICS]))
        avg = block_means(report, present)
        lines.append(row(f"{block} avg", [f"{avg[m]:.2f}" for m in TABLE_METRICS]))
    all_dirs = [d for d in list(seen) + list(unseen) if d in report.directions()]
    if all_dirs:
        avg = block_means(report, all_dirs)
        lines.append(row("Overall", [f"{avg[m]:.2f}" for m in TABLE_METRICS]))
    return "\n".join(lines) + "\n"


def format_ablation_table(with_cons: MetricsReport, without: MetricsReport, unseen: Sequence[str]) -> str:
    a, b = block_means(with_cons, unseen), block_means(without, unseen)
    lines = ["Consistency-loss ablation (unseen directions)", f"{'model':<26}" + "".join(f"{l:>14}" for l in TABLE_LABELS)]
    lines.append(f"{'with consistency':<26}" + "".join(f"{a[m]:>14.2f}" for m in TABLE_METRICS))
    lines.append(f"{'lambda_consistency = 0':<26}" + "".join(f"{b[m]:>14.2f}" for m in TABLE_METRICS))
    return "\n".join(lines) + "\n"


# -- reproduction ------------------------------------------------------------------------------
@dataclass
class ReproductionResult:
    out_dir: Path
    report: MetricsReport
    ablation_report: MetricsReport
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    phase1_val: list[float]
    phase2_val: list[float]
    timings: dict[str, float] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        """Every reported mean, keyed ``model/direction/metric``."""
        out = {}
        for name, rep in (("hail", self.report), ("ablation", self.ablation_report)):
            for d in rep.directions():
                for m in METRIC_FIELDS:
                    out[f"{name}/{d}/{m}"] = rep.mean(m, d)
        return out


def run_reproduction(config: HailConfig, out_dir: str | os.PathLike) -> ReproductionResult:
    """gen -> pretrain -> train -> ablation train -> evaluate, all under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.echo(out)
    timings = {}

    t = time.perf_counter()
    data = out / "data"
    generate_dataset(
        config["phantom.n_per_site"], config.site_profiles(), data, config["phantom.seed"], config["phantom.edge"]
    )
    manifest = read_manifest(data / MANIFEST_NAME)
    timings["generate"] = time.perf_counter() - t

    t = time.perf_counter()
    split1 = split_dataset(manifest, 1, config["data.split_seed"])
    p1 = pretrain_phase1(split1, config.train_config(1), data, out / "phase1")
    timings["phase1"] = time.perf_counter() - t

    split2 = split_dataset(
        manifest, 2, config["data.split_seed"], config["data.phase2_sites"], config["data.held_out_site"]
    )
    sites = tuple(config["data.phase2_sites"])
    held = config["data.held_out_site"]
    t = time.perf_counter()
    p2 = train_phase2(split2, p1.checkpoint_path, config.train_config(2), data, out / "phase2", sites, held)
    timings["phase2"] = time.perf_counter() - t

    t = time.perf_counter()
    ablation_cfg = config.with_values({"loss.lambda_consistency": 0.0})
    ab = train_phase2(
        split2, p1.checkpoint_path, ablation_cfg.train_config(2), data, out / "ablation", sites, held
    )
    ablation_cfg.echo(out / "ablation")
    timings["ablation"] = time.perf_counter() - t

    t = time.perf_counter()
    protocol = EvalProtocol(split2, VolumeStore(data))
    seen, unseen = tuple(config["eval.seen_directions"]), tuple(config["eval.unseen_directions"])
    directions = seen + unseen
    policy = config["eval.mask_policy"]
    report = protocol.evaluate(_harmonizer(p2.model, config), directions, policy)
    ab_report = protocol.evaluate(_harmonizer(ab.model, config), directions, policy)
    timings["evaluate"] = time.perf_counter() - t

    report.write(out / "metrics_hail.csv")
    ab_report.write(out / "metrics_ablation.csv")
    tables = (
        format_results_table(report, seen, unseen, "Harmonization with consistency loss")
        + "\n"
        + format_results_table(ab_report, seen, unseen, "Harmonization with lambda_consistency = 0")
        + "\n"
        + format_ablation_table(report, ab_report, unseen)
    )
    (out / "tables.txt").write_text(tables, encoding="utf-8")
    log.info("reproduction finished: %s", {k: round(v, 1) for k, v in timings.items()})
    return ReproductionResult(
        out, report, ab_report, seen, unseen, p1.log.val_history(), p2.log.val_history(), timings
    )


def _harmonizer(model: HailModel, config: HailConfig) -> Harmonizer:
    return Harmonizer(model, overlap=config["eval.overlap"], batch_size=config["eval.batch_size"])
