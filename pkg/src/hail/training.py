"""Two-phase training.

Phase 1 trains the encoder/decoder as an autoencoder on random patches from
every site. Phase 2 freezes the encoder and retrains the decoder as a
one-shot style-transfer model on cross-site pairs, alternating the
direction (A->B, B->A, ...) instance by instance within each batch.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Parameter, Tensor, backward, no_grad
from .losses import (
    LossWeights,
    l1_loss,
    phase2_components,
    ssim_loss,
    weighted_total,
)
from .model import HailModel, ModelCheckpoint, ModelConfig, adain, load_checkpoint, save_checkpoint
from .phantom import ManifestEntry
from .volume import Volume, check_training_patch_size, minmax_normalize, random_patch_spec, read_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one training phase.

    Batch and epochs default to desk scale; full-scale training uses lr 1e-4, batch 48
    (phase 1) / 32 (phase 2), 1000 epochs and 64^3 patches with base 64.
    """

    phase: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    plateau_factor: float = 0.8
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-4
    patch_size: int = 16
    base: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    patches_per_volume: int = 1
    pairs_per_epoch: int = 16
    val_patches: int = 16

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {self.phase}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        check_training_patch_size(self.patch_size)


# -- data splits ----------------------------------------------------------------------
@dataclass
class DatasetSplit:
    phase: int
    train: dict[str, list[ManifestEntry]]
    val: dict[str, list[ManifestEntry]]
    test: dict[str, list[ManifestEntry]] = field(default_factory=dict)
    held_out: dict[str, list[ManifestEntry]] = field(default_factory=dict)

    def all_train(self) -> list[ManifestEntry]:
        return [e for site in sorted(self.train) for e in self.train[site]]

    def all_val(self) -> list[ManifestEntry]:
        return [e for site in sorted(self.val) for e in self.val[site]]


def _by_site(manifest: Sequence[ManifestEntry]) -> dict[str, list[ManifestEntry]]:
    sites: dict[str, list[ManifestEntry]] = {}
    for e in manifest:
        sites.setdefault(e.site_id, []).append(e)
    return sites


def split_dataset(
    manifest: Sequence[ManifestEntry],
    phase: int,
    seed: int = 0,
    phase2_sites: Sequence[str] = ("A", "B"),
    held_out_site: str = "C",
) -> DatasetSplit:
    """Per-site seeded shuffle, then 80:20 (phase 1, all sites) or 70:20:10
    (phase 2, ``phase2_sites`` only; the held-out site is kept apart)."""
    if not manifest:
        raise ValueError("manifest is empty")
    sites = _by_site(manifest)
    split = DatasetSplit(phase, {}, {})
    for k, site in enumerate(sorted(sites)):
        entries = list(sites[site])
        order = np.random.default_rng([seed, phase, k]).permutation(len(entries))
        entries = [entries[i] for i in order]
        n = len(entries)
        if phase == 1:
            n_train = min(max(1, int(math.floor(0.8 * n + 0.5))), n)
            split.train[site] = entries[:n_train]
            split.val[site] = entries[n_train:]
            continue
        if site == held_out_site:
            split.held_out[site] = entries
            continue
        if site not in phase2_sites:
            continue
        if n < 3:
            raise ValueError(f"site {site!r} has {n} volumes; phase 2 needs at least 3")
        n_train = max(1, int(math.floor(0.7 * n + 0.5)))
        n_val = max(1, int(math.floor(0.2 * n + 0.5)))
        n_train = min(n_train, n - 2)
        split.train[site] = entries[:n_train]
        split.val[site] = entries[n_train : n_train + n_val]
        split.test[site] = entries[n_train + n_val :]
    if phase == 2:
        missing = [s for s in phase2_sites if s not in split.train]
        if missing:
            raise ValueError(f"phase 2 sites missing from manifest: {missing}")
    return split


class VolumeStore:
    """Loads and min-max normalizes manifest volumes once, keeps them in memory."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._cache: dict[str, Volume] = {}

    def get(self, entry: ManifestEntry) -> Volume:
        vol = self._cache.get(entry.volume_path)
        if vol is None:
            vol = read_volume(self.root / entry.volume_path)
            if vol.norm is None:
                vol = minmax_normalize(vol)
            self._cache[entry.volume_path] = vol
        return vol


# -- optimizer and schedule -------------------------------------------------------------
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float,
) -> None:
    """One AdamW update in place: decoupled weight decay, bias-corrected moments."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g in zip(params, grads):
        w = p.tensor.data
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(w)
            state.v[p.name] = np.zeros_like(w)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w = w * np.float32(1.0 - lr * state.weight_decay)
        w = w - np.float32(lr) * ((m / corr1) / (np.sqrt(v / corr2) + state.eps))
        p.tensor.data = w.astype(np.float32)


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.state = OptimizerState(weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        adamw_step(self.params, [p.tensor.grad for p in self.params], self.state, self.lr)


class PlateauScheduler:
    """Multiply the lr by ``factor`` once the tracked loss has failed to
    improve on its best by ``min_delta`` for ``patience`` epochs in a row."""

    def __init__(self, lr: float, factor: float = 0.8, patience: int = 10, min_delta: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# -- run log ------------------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_components: tuple[float, ...]
    val_total: float
    lr: float
    checkpoint: str | None = None


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def val_history(self) -> list[float]:
        return [r.val_total for r in self.records]

    def best(self) -> EpochRecord:
        return min(self.records, key=lambda r: r.val_total)

    def best_checkpoint(self) -> str | None:
        paths = [r.checkpoint for r in self.records if r.checkpoint]
        return paths[-1] if paths else None

    def to_text(self) -> str:
        lines = []
        for r in self.records:
            comps = ",".join(repr(float(c)) for c in r.train_components)
            lines.append(
                f"{r.epoch}\t{float(r.train_total)!r}\t{comps}\t{float(r.val_total)!r}\t{float(r.lr)!r}\t{r.checkpoint or '-'}"
            )
        return "".join(line + "\n" for line in lines)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RunLog":
        out = cls()
        for line in text.splitlines():
            if not line:
                continue
            ep, tt, comps, vt, lr, ck = line.split("\t")
            out.append(
                EpochRecord(
                    int(ep),
                    float(tt),
                    tuple(float(c) for c in comps.split(",")) if comps else (),
                    float(vt),
                    float(lr),
                    None if ck == "-" else ck,
                )
            )
        return out

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def lr_plateau(log: RunLog, patience: int = 10, factor: float = 0.8, min_delta: float = 1e-4) -> float:
    """Learning rate after replaying the logged validation losses through
    the plateau rule, starting from the first logged lr."""
    if not log.records:
        raise ValueError("run log is empty")
    sched = PlateauScheduler(log.records[0].lr, factor, patience, min_delta)
    for v in log.val_history():
        sched.step(v)
    return sched.lr


# -- shared helpers ----------------------------------------------------------------------------
def _check_finite(value: float, phase: int, epoch: int) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"phase {phase}: non-finite loss {value} at epoch {epoch}")


def _stack(patches: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(patches)[:, None])


def _crop(vol: Volume, spec) -> np.ndarray:
    return vol.data[spec.slices()]


def _model_config(config: TrainConfig) -> ModelConfig:
    w = config.weights
    return ModelConfig(config.base, config.patch_size, w.lambda_style, w.lambda_content, w.lambda_consistency)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log: RunLog
    model: HailModel
    best_val: float


# -- phase 1 ----------------------------------------------------------------------------------
def _recon_losses(model: HailModel, x: Tensor) -> tuple[Tensor, Tensor]:
    pred = model.reconstruct(x)
    return l1_loss(pred, x), ssim_loss(pred, x)


def phase1_validation_batch(split: DatasetSplit, store: VolumeStore, config: TrainConfig) -> np.ndarray:
    """Fixed validation patches, a pure function of (split, seed)."""
    rng = np.random.default_rng([config.seed, 101])
    vols = [store.get(e) for e in split.all_val()]
    if not vols:
        raise ValueError("phase 1 split has no validation volumes")
    patches = []
    for j in range(config.val_patches):
        vol = vols[j % len(vols)]
        patches.append(_crop(vol, random_patch_spec(vol.dims, config.patch_size, rng)))
    return np.stack(patches)[:, None]


def evaluate_phase1(model: HailModel, batch: np.ndarray, batch_size: int) -> float:
    total = 0.0
    with no_grad():
        for k in range(0, len(batch), batch_size):
            x = Tensor(batch[k : k + batch_size])
            l1, ss = _recon_losses(model, x)
            total += (0.5 * l1.item() + 0.5 * ss.item()) * len(x.data)
    return total / len(batch)


def pretrain_phase1(
    split: DatasetSplit,
    config: TrainConfig,
    data_root: str | os.PathLike,
    out_dir: str | os.PathLike,
) -> TrainResult:
    """Autoencoder pre-training; writes the best-validation checkpoint and run log."""
    if config.phase != 1:
        config = replace(config, phase=1)
    train_entries = split.all_train()
    if not train_entries:
        raise ValueError("phase 1 split has no training volumes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = VolumeStore(data_root)
    train_vols = [store.get(e) for e in train_entries]
    val_batch = phase1_validation_batch(split, store, config)

    model = HailModel(_model_config(config), seed=config.seed)
    opt = AdamW(model.parameters(), config.learning_rate, config.weight_decay)
    sched = PlateauScheduler(
        config.learning_rate, config.plateau_factor, config.plateau_patience, config.plateau_min_delta
    )
    rng = np.random.default_rng([config.seed, 11])
    ckpt_path = out / "phase1_best.hckp"
    log_path = out / "phase1_runlog.tsv"
    runlog = RunLog()
    best = math.inf

    for epoch in range(1, config.epochs + 1):
        patches = [
            _crop(vol, random_patch_spec(vol.dims, config.patch_size, rng))
            for vol in train_vols
            for _ in range(config.patches_per_volume)
        ]
        order = rng.permutation(len(patches))
        sums = np.zeros(2)
        for k in range(0, len(order), config.batch_size):
            x = _stack([patches[i] for i in order[k : k + config.batch_size]])
            l1, ss = _recon_losses(model, x)
            loss = 0.5 * l1 + 0.5 * ss
            _check_finite(loss.item(), 1, epoch)
            opt.zero_grad()
            backward(loss)
            opt.step()
            sums += np.array([l1.item(), ss.item()]) * len(x.data)
        comps = tuple(sums / len(order))
        train_total = 0.5 * comps[0] + 0.5 * comps[1]
        val = evaluate_phase1(model, val_batch, config.batch_size)
        _check_finite(val, 1, epoch)
        saved = None
        if val < best:
            best = val
            save_checkpoint(ModelCheckpoint.from_model(model, 1), ckpt_path)
            saved = str(ckpt_path)
        runlog.append(EpochRecord(epoch, train_total, comps, val, opt.lr, saved))
        runlog.write(log_path)
        opt.lr = sched.step(val)
        log.info("phase1 epoch %d train %.5f val %.5f lr %.2e", epoch, train_total, val, opt.lr)

    best_model = load_checkpoint(ckpt_path).to_model()
    return TrainResult(ckpt_path, runlog, best_model, best)


# -- phase 2 ----------------------------------------------------------------------------------
@dataclass(frozen=True)
class PairSample:
    """One phase-2 instance: input/target entries and the shared patch."""

    source: ManifestEntry
    target: ManifestEntry
    spec: object


def phase2_directions(sites: Sequence[str], n: int) -> list[tuple[str, str]]:
    """Alternating directions A->B, B->A, ... for ``n`` batch instances."""
    a, b = sites
    return [(a, b) if j % 2 == 0 else (b, a) for j in range(n)]


def sample_pairs(
    pool: dict[str, list[ManifestEntry]],
    sites: Sequence[str],
    n: int,
    patch: int,
    dims: tuple[int, int, int],
    rng: np.random.Generator,
    held_out_site: str | None = None,
) -> list[PairSample]:
    pairs = []
    for src, dst in phase2_directions(sites, n):
        if held_out_site is not None and held_out_site in (src, dst):
            raise AssertionError(f"held-out site {held_out_site!r} sampled for training")
        s = pool[src][int(rng.integers(len(pool[src])))]
        t = pool[dst][int(rng.integers(len(pool[dst])))]
        pairs.append(PairSample(s, t, random_patch_spec(dims, patch, rng)))
    return pairs


def phase2_step_losses(model: HailModel, x: Tensor, t: Tensor) -> dict[str, Tensor]:
    """Forward pass of the Siamese style-transfer objective on one batch."""
    with no_grad():
        feats_t = model.encoder(t)
        mixed = adain(model.encoder(x)[3], feats_t[3])
    pred = model.decoder(mixed)
    feats_p = model.encoder(pred)
    return phase2_components(pred, x, feats_p, feats_t, mixed)


def _pair_batch(pairs: Sequence[PairSample], store: VolumeStore) -> tuple[Tensor, Tensor]:
    xs, ts = [], []
    for p in pairs:
        src, dst = store.get(p.source), store.get(p.target)
        if src.dims != dst.dims:
            raise ValueError(f"paired volumes differ in dims: {src.dims} vs {dst.dims}")
        xs.append(_crop(src, p.spec))
        ts.append(_crop(dst, p.spec))
    return _stack(xs), _stack(ts)


def evaluate_phase2(
    model: HailModel, pairs: Sequence[PairSample], store: VolumeStore, config: TrainConfig
) -> tuple[float, tuple[float, ...]]:
    sums = np.zeros(3)
    with no_grad():
        for k in range(0, len(pairs), config.batch_size):
            group = pairs[k : k + config.batch_size]
            x, t = _pair_batch(group, store)
            comps = phase2_step_losses(model, x, t)
            sums += np.array([comps[c].item() for c in ("content", "style", "consistency")]) * len(group)
    means = sums / len(pairs)
    w = config.weights
    total = w.lambda_content * means[0] + w.lambda_style * means[1] + w.lambda_consistency * means[2]
    return float(total), tuple(means)


def train_phase2(
    split: DatasetSplit,
    phase1_checkpoint: str | os.PathLike | ModelCheckpoint,
    config: TrainConfig,
    data_root: str | os.PathLike,
    out_dir: str | os.PathLike,
    sites: Sequence[str] = ("A", "B"),
    held_out_site: str = "C",
    checkpoint_name: str = "phase2_best.hckp",
) -> TrainResult:
    """Style-transfer training with the phase-1 encoder frozen.

    The decoder starts from the phase-1 decoder weights. Every batch
    alternates A->B and B->A instances; each instance pairs random training
    volumes of the two sites and crops both at one random location.
    """
    if config.phase != 2:
        config = replace(config, phase=2)
    for s in sites:
        if s == held_out_site:
            raise AssertionError(f"held-out site {held_out_site!r} listed as a training site")
        if not split.train.get(s) or not split.val.get(s):
            raise ValueError(f"phase 2 split lacks train/val volumes for site {s!r}")
    ckpt = phase1_checkpoint if isinstance(phase1_checkpoint, ModelCheckpoint) else load_checkpoint(phase1_checkpoint)
    model = ckpt.to_model()
    model.config = _model_config(replace(config, base=ckpt.config.base, patch_size=config.patch_size))
    model.encoder.freeze()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = VolumeStore(data_root)
    dims = store.get(split.train[sites[0]][0]).dims
    val_rng = np.random.default_rng([config.seed, 202])
    val_pairs = sample_pairs(split.val, sites, config.val_patches, config.patch_size, dims, val_rng, held_out_site)

    opt = AdamW(model.decoder.parameters(), config.learning_rate, config.weight_decay)
    sched = PlateauScheduler(
        config.learning_rate, config.plateau_factor, config.plateau_patience, config.plateau_min_delta
    )
    rng = np.random.default_rng([config.seed, 22])
    ckpt_path = out / checkpoint_name
    log_path = out / checkpoint_name.replace(".hckp", "_runlog.tsv")
    runlog = RunLog()
    best = math.inf

    for epoch in range(1, config.epochs + 1):
        pairs = sample_pairs(split.train, sites, config.pairs_per_epoch, config.patch_size, dims, rng, held_out_site)
        sums = np.zeros(3)
        for k in range(0, len(pairs), config.batch_size):
            group = pairs[k : k + config.batch_size]
            x, t = _pair_batch(group, store)
            comps = phase2_step_losses(model, x, t)
            loss = weighted_total(comps, config.weights)
            _check_finite(loss.item(), 2, epoch)
            opt.zero_grad()
            backward(loss)
            opt.step()
            sums += np.array([comps[c].item() for c in ("content", "style", "consistency")]) * len(group)
        means = tuple(sums / len(pairs))
        w = config.weights
        train_total = w.lambda_content * means[0] + w.lambda_style * means[1] + w.lambda_consistency * means[2]
        val, _ = evaluate_phase2(model, val_pairs, store, config)
        _check_finite(val, 2, epoch)
        saved = None
        if val < best:
            best = val
            save_checkpoint(ModelCheckpoint.from_model(model, 2), ckpt_path)
            saved = str(ckpt_path)
        runlog.append(EpochRecord(epoch, train_total, means, val, opt.lr, saved))
        runlog.write(log_path)
        opt.lr = sched.step(val)
        log.info("phase2 epoch %d train %.5f val %.5f lr %.2e", epoch, train_total, val, opt.lr)

    best_model = load_checkpoint(ckpt_path).to_model()
    return TrainResult(ckpt_path, runlog, best_model, best)
