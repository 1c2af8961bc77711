"""Curriculum training of the shared encoder/decoder and the per-interval predictors."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .dataset import (
    Climatology,
    GridField,
    NormalizationStats,
    VariableCatalog,
    compute_climatology,
    compute_stats,
    latitude_weights,
    normalize,
)
from .errors import CheckpointError, ConfigError, SamplingError
from .losses import LossParts, LossWeights, inverse_variance, key_loss, latent_loss, recon_loss, total_loss, variable_weights
from .model import Forecaster, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "interval", "T_train", "loss_key", "loss_recon", "loss_latent", "loss_total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 65
    curriculum: tuple = (2, 4, 6, 8)
    boundaries: tuple = (0, 50, 55, 60, 65)
    lr0: float = 2e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    lr_decay_until: int = 50
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1.0
    batch_size: int = 32
    grad_clip: float | None = 1.0
    intervals: tuple = (1, 2, 4)
    steps_per_epoch: int | None = None
    lead_weights: tuple | None = None
    detach_latent_target: bool = True
    val_batches: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("curriculum", "boundaries", "betas", "intervals"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.lead_weights is not None:
            object.__setattr__(self, "lead_weights", tuple(self.lead_weights))
        b = self.boundaries
        if len(b) != len(self.curriculum) + 1:
            raise ConfigError(f"{len(self.curriculum)} curriculum stages need {len(self.curriculum) + 1} boundaries")
        if any(x >= y for x, y in zip(b[:-1], b[1:])) or b[0] != 0 or b[-1] != self.epochs:
            raise ConfigError(f"boundaries {b} must increase strictly from 0 to epochs={self.epochs}")
        if any(x >= y for x, y in zip(self.curriculum[:-1], self.curriculum[1:])):
            raise ConfigError(f"curriculum {self.curriculum} must increase strictly")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def curriculum_iters(epoch: int, cfg: TrainConfig = TrainConfig()) -> int:
    """Number of predictor iterations trained at this epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    for stage, upper in enumerate(cfg.boundaries[1:]):
        if epoch < upper:
            return cfg.curriculum[stage]
    raise AssertionError("unreachable")


def learning_rate(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Step decay every ``lr_decay_every`` epochs, frozen from ``lr_decay_until`` on."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    halvings = min(epoch, cfg.lr_decay_until) // cfg.lr_decay_every
    return cfg.lr0 * cfg.lr_decay ** halvings


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW; matrices/kernels decay, norm gains, biases and scalars do not."""
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr0, betas=cfg.betas, foreach=False)


@dataclass
class DataBundle:
    """Normalized training inputs plus the statistics derived from the training split."""

    train: np.ndarray            # [T, C, H, W] normalized float32
    hours: np.ndarray            # [T] hours since epoch
    catalog: VariableCatalog
    stats: NormalizationStats
    climatology: Climatology
    lat: np.ndarray
    lon: np.ndarray
    dt_hours: float
    q: np.ndarray
    w: np.ndarray
    a: np.ndarray
    val: np.ndarray | None = None
    val_hours: np.ndarray | None = None

    @classmethod
    def from_fields(cls, train: GridField, catalog: VariableCatalog, val: GridField | None = None,
                    clim_mode: str = "simple"):
        stats = compute_stats(train, catalog)
        z = normalize(train, stats).data.astype(np.float32)
        key = list(catalog.key_indices)
        return cls(
            train=z,
            hours=train.hours(),
            catalog=catalog,
            stats=stats,
            climatology=compute_climatology(train, clim_mode),
            lat=train.lat,
            lon=train.lon,
            dt_hours=train.dt_hours,
            q=inverse_variance(z[:, key]),
            w=variable_weights(catalog),
            a=latitude_weights(train.lat),
            val=None if val is None else normalize(val, stats).data.astype(np.float32),
            val_hours=None if val is None else val.hours(),
        )


def sample_batch(x: np.ndarray, hours: np.ndarray, interval: int, n_iter: int, batch: int, rng):
    """Windows of n_iter + 2 steps at stride ``interval``; returns (x [B, n+2, C, H, W], hours [B, n+2])."""
    T = x.shape[0]
    hi = T - 1 - interval * n_iter
    if hi < interval:
        raise SamplingError(
            f"sequence of {T} steps too short for interval {interval} and {n_iter} iterations"
        )
    t = rng.integers(interval, hi + 1, size=batch)
    idx = t[:, None] + interval * np.arange(-1, n_iter + 1)[None, :]
    return torch.from_numpy(x[idx]), torch.from_numpy(hours[idx])


def forward_losses(model: Forecaster, x, hours, interval: int, weights: LossWeights,
                   lead_weights=None, detach_target: bool = True):
    """Encode every step, roll the chosen predictor forward, decode; returns (LossParts, n_lpm_calls)."""
    n = x.shape[1] - 2
    key = list(model.cfg.key_indices)
    h_all = model.encode(x)
    h_prev, h_curr = h_all[:, 0], h_all[:, 1]
    preds = []
    for k in range(n):
        h_next = model.lpm_step(h_prev, h_curr, hours[:, k], hours[:, k + 1], interval)
        preds.append(h_next)
        h_prev, h_curr = h_curr, h_next
    h_pred = torch.stack(preds, dim=1)
    h_target = h_all[:, 2:]
    if detach_target:
        h_target = h_target.detach()
    lw = None if lead_weights is None else list(lead_weights)[:n]
    parts = LossParts(
        key_loss(model.decode(h_pred), x[:, 2:, key], weights),
        recon_loss(model.decode(h_all), x[:, :, key], weights.a),
        latent_loss(h_pred, h_target, weights.a, lw),
    )
    return parts, n


class Trainer:
    def __init__(self, model: Forecaster, data: DataBundle, cfg: TrainConfig, seed: int | None = None):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.optimizer = build_optimizer(model, cfg)
        self.weights = LossWeights(data.q, data.w, data.a)
        self.step = 0
        self.epoch = 0
        missing = set(cfg.intervals) - set(model.intervals)
        if missing:
            raise ConfigError(f"training intervals {sorted(missing)} have no predictor")

    def train_step(self, epoch: int) -> dict:
        cfg = self.cfg
        n_iter = curriculum_iters(epoch, cfg)
        lr = learning_rate(epoch, cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        interval = int(self.rng.choice(cfg.intervals))
        x, hours = sample_batch(self.data.train, self.data.hours, interval, n_iter, cfg.batch_size, self.rng)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        parts, _ = forward_losses(self.model, x, hours, interval, self.weights,
                                  cfg.lead_weights, cfg.detach_latent_target)
        loss = total_loss(parts)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                [p for p in self.model.parameters() if p.grad is not None], cfg.grad_clip
            )
        self.optimizer.step()
        self.step += 1
        self.epoch = epoch
        return {
            "step": self.step, "epoch": epoch, "interval": interval, "T_train": n_iter,
            "loss_key": parts.key.item(), "loss_recon": parts.recon.item(),
            "loss_latent": parts.latent.item(), "loss_total": loss.item(), "lr": lr,
        }

    @torch.no_grad()
    def validate(self, epoch: int) -> dict | None:
        if self.data.val is None:
            return None
        n_iter = curriculum_iters(epoch, self.cfg)
        rng = np.random.default_rng(12345)
        self.model.eval()
        totals = []
        for s in self.cfg.intervals:
            for _ in range(self.cfg.val_batches):
                try:
                    x, hours = sample_batch(self.data.val, self.data.val_hours, s, n_iter, self.cfg.batch_size, rng)
                except SamplingError:
                    continue
                parts, _ = forward_losses(self.model, x, hours, s, self.weights, self.cfg.lead_weights)
                totals.append(float(total_loss(parts)))
        return {"epoch": epoch, "val_loss": float(np.mean(totals)) if totals else math.nan}

    def steps_per_epoch(self) -> int:
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        return max(1, self.data.train.shape[0] // self.cfg.batch_size)

    # -- checkpointing --------------------------------------------------

    def config_dict(self) -> dict:
        return {"model": self.model.cfg.to_dict(), "train": self.cfg.to_dict()}

    def config_hash(self) -> str:
        return ckpt_io.config_hash(self.config_dict())

    def save(self, path, next_epoch: int | None = None) -> Path:
        arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        opt = self.optimizer.state_dict()
        for pid, st in opt["state"].items():
            for k, v in st.items():
                arrays[f"optim/{pid}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        d = self.data
        arrays.update({
            "stats/mean": d.stats.mean, "stats/std": d.stats.std,
            "clim/mean_field": d.climatology.mean_field.astype(np.float32),
            "grid/lat": d.lat, "grid/lon": d.lon,
            "weights/q": d.q, "weights/w": d.w,
        })
        meta = {
            "config": self.config_dict(),
            "config_hash": self.config_hash(),
            "catalog": d.catalog.to_dict(),
            "epoch": self.epoch if next_epoch is None else next_epoch,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "param_groups": [{k: v for k, v in g.items()} for g in opt["param_groups"]],
            "dt_hours": d.dt_hours,
            "clim_mode": d.climatology.mode,
            "param_digest": ckpt_io.array_digest(
                np.concatenate([p.detach().cpu().numpy().ravel() for p in self.model.parameters()])
            ),
        }
        return ckpt_io.write_checkpoint(path, meta, arrays)

    def restore(self, meta: dict, arrays: dict):
        state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
        self.model.load_state_dict(state)
        opt_state = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, pid, name = k.split("/")
                opt_state.setdefault(int(pid), {})[name] = torch.from_numpy(v.copy())
        self.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
        self.rng.bit_generator.state = meta["rng_state"]
        self.step = int(meta["step"])
        self.epoch = int(meta["epoch"])


@dataclass
class Checkpoint:
    """Everything needed to run or resume a trained forecaster."""

    meta: dict
    arrays: dict = field(repr=False)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["config"]["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.meta["config"]["train"])

    @property
    def catalog(self) -> VariableCatalog:
        return VariableCatalog.from_dict(self.meta["catalog"])

    @property
    def stats(self) -> NormalizationStats:
        return NormalizationStats(self.arrays["stats/mean"], self.arrays["stats/std"])

    @property
    def climatology(self) -> Climatology:
        return Climatology(self.arrays["clim/mean_field"].astype(np.float64), self.meta.get("clim_mode", "simple"))

    @property
    def config_hash(self) -> str:
        return self.meta["config_hash"]

    def build_model(self) -> Forecaster:
        cfg = self.model_config
        model = Forecaster(cfg)
        state = {k[len("model/"):]: torch.from_numpy(v) for k, v in self.arrays.items() if k.startswith("model/")}
        model.load_state_dict(state)
        model.eval()
        return model

    def data_bundle(self, train: np.ndarray | None = None, hours: np.ndarray | None = None) -> DataBundle:
        lat = self.arrays["grid/lat"]
        return DataBundle(
            train=train if train is not None else np.zeros((0,), np.float32),
            hours=hours if hours is not None else np.zeros((0,)),
            catalog=self.catalog, stats=self.stats, climatology=self.climatology,
            lat=lat, lon=self.arrays["grid/lon"], dt_hours=self.meta["dt_hours"],
            q=self.arrays["weights/q"], w=self.arrays["weights/w"], a=latitude_weights(lat),
        )


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    meta, arrays = ckpt_io.read_checkpoint(path)
    stored = ckpt_io.config_hash(meta["config"])
    if stored != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash {meta['config_hash']} does not match its config ({stored})")
    if expected_hash is not None and expected_hash != meta["config_hash"] and not force:
        raise CheckpointError(
            f"{path}: config hash {meta['config_hash']} differs from current {expected_hash}; "
            "pass force=True to load anyway"
        )
    return Checkpoint(meta, arrays)


def _append_csv(path: Path, row: dict, columns):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns))
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in columns})


def fit(data: DataBundle, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir,
        constants=None, resume=None, force: bool = False, progress=None) -> Path:
    """Run the full epoch loop; writes ``checkpoint.ckpt``, ``train_log.csv`` and ``val_log.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    model = Forecaster(model_cfg, constants)
    trainer = Trainer(model, data, train_cfg)
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume, trainer.config_hash(), force=force)
        trainer.restore(ck.meta, ck.arrays)
        start_epoch = trainer.epoch
        log.info("resumed from %s at epoch %d step %d", resume, start_epoch, trainer.step)
    ckpt_path = out / "checkpoint.ckpt"
    for epoch in range(start_epoch, train_cfg.epochs):
        for _ in range(trainer.steps_per_epoch()):
            rec = trainer.train_step(epoch)
            _append_csv(out / "train_log.csv", rec, LOG_COLUMNS)
            if progress:
                progress(rec)
        val = trainer.validate(epoch)
        if val is not None:
            _append_csv(out / "val_log.csv", val, ("epoch", "val_loss"))
            log.info("epoch %d val_loss %.5f", epoch, val["val_loss"])
        trainer.save(ckpt_path, next_epoch=epoch + 1)
    if not ckpt_path.exists():
        trainer.save(ckpt_path, next_epoch=trainer.epoch)
    return ckpt_path
