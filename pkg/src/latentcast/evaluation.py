"""Latitude-weighted verification metrics, the test protocol, attribution and correlation analysis."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataset import Climatology, GridField, NormalizationStats, VariableCatalog, hours_since_epoch, normalize
from .errors import ShapeError
from .htami import HISTORY, rollout

log = logging.getLogger(__name__)


def _check(pred, truth):
    if np.shape(pred) != np.shape(truth):
        raise ShapeError(f"prediction {np.shape(pred)} and truth {np.shape(truth)} differ")


def rmse_lat(pred, truth, a) -> np.ndarray:
    """sqrt(sum_i a_i (pred - truth)^2 / (H*W)) over the trailing [H, W] grid."""
    _check(pred, truth)
    p, t = np.asarray(pred, np.float64), np.asarray(truth, np.float64)
    a = np.asarray(a, np.float64)[:, None]
    H, W = p.shape[-2:]
    return np.sqrt((a * (p - t) ** 2).sum(axis=(-2, -1)) / (H * W))


def acc_lat(pred, truth, clim, a) -> np.ma.MaskedArray:
    """Latitude-weighted anomaly correlation over the trailing grid.

    Entries whose forecast or observed anomaly has zero weighted energy are masked.
    """
    _check(pred, truth)
    p = np.asarray(pred, np.float64) - clim
    t = np.asarray(truth, np.float64) - clim
    a = np.asarray(a, np.float64)[:, None]
    num = (a * p * t).sum(axis=(-2, -1))
    den = np.sqrt((a * p * p).sum(axis=(-2, -1)) * (a * t * t).sum(axis=(-2, -1)))
    undefined = ~(den > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(undefined, 0.0, num / np.where(undefined, 1.0, den))
    return np.ma.masked_array(np.clip(val, -1.0, 1.0), mask=undefined)


def persistence_forecast(last_obs: np.ndarray, n: int) -> np.ndarray:
    """[..., C, H, W] -> [..., n, C, H, W], repeating the last observed field."""
    return np.repeat(np.asarray(last_obs)[..., None, :, :, :], n, axis=-4)


# --------------------------------------------------------------------------
# test protocol


ForecastFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def model_forecast_fn(model, dt_hours: float, batch: int = 16) -> ForecastFn:
    """Wrap a Forecaster: (history [B, 5, C, H, W] normalized, hours of step 0 [B], n) -> keys [B, n, c, H, W]."""

    @torch.no_grad()
    def fn(history, hours0, n):
        model.eval()
        outs = []
        for s in range(0, len(history), batch):
            x = torch.from_numpy(np.ascontiguousarray(history[s:s + batch], dtype=np.float32))
            h = model.encode(x)
            lat = rollout(model, h, n, torch.as_tensor(hours0[s:s + batch]), dt_hours)
            outs.append(model.decode(lat).numpy())
        return np.concatenate(outs)

    return fn


def init_indices(field_: GridField, horizon: int, init_hours=(0, 12), history: int = HISTORY,
                 max_inits: int | None = None) -> list:
    """Steps at the requested UTC hours with enough history and future for scoring."""
    idx = []
    for t in range(field_.n_steps):
        if field_.time_at(t).hour not in init_hours:
            continue
        if t - (history - 1) < 0 or t + horizon >= field_.n_steps:
            log.warning("skipping init %s: insufficient history or verification range", field_.time_at(t).isoformat())
            continue
        idx.append(t)
    if max_inits is not None and len(idx) > max_inits:
        pick = np.linspace(0, len(idx) - 1, max_inits).round().astype(int)
        idx = [idx[i] for i in pick]
    return idx


@dataclass
class MetricReport:
    variables: list
    lead_hours: np.ndarray
    rmse: np.ndarray                      # [c, n]
    acc: np.ma.MaskedArray                # [c, n]
    persistence_rmse: np.ndarray
    persistence_acc: np.ma.MaskedArray
    n_inits: int
    metadata: dict = field(default_factory=dict)

    def rows(self):
        for j, name in enumerate(self.variables):
            for k, lh in enumerate(self.lead_hours):
                yield {
                    "variable": name,
                    "lead_hours": int(lh),
                    "rmse": float(self.rmse[j, k]),
                    "acc": _cell(self.acc[j, k]),
                    "n_inits": self.n_inits,
                    "persistence_rmse": float(self.persistence_rmse[j, k]),
                    "persistence_acc": _cell(self.persistence_acc[j, k]),
                }

    def to_csv(self, path) -> Path:
        path = Path(path)
        cols = ["variable", "lead_hours", "rmse", "acc", "n_inits", "persistence_rmse", "persistence_acc"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in self.rows():
                w.writerow({k: ("null" if r[k] is None else r[k]) for k in cols})
        return path

    def summary(self) -> dict:
        return {
            "variables": list(self.variables),
            "n_inits": self.n_inits,
            "horizon_steps": len(self.lead_hours),
            "mean_rmse": {v: float(self.rmse[j].mean()) for j, v in enumerate(self.variables)},
            "mean_acc": {v: _cell(self.acc[j].mean()) for j, v in enumerate(self.variables)},
            "lead1_rmse": {v: float(self.rmse[j, 0]) for j, v in enumerate(self.variables)},
            "lead1_persistence_rmse": {v: float(self.persistence_rmse[j, 0]) for j, v in enumerate(self.variables)},
            "metadata": self.metadata,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2))
        return path


def _cell(v):
    return None if v is np.ma.masked or np.ma.is_masked(v) else float(v)


def evaluate(forecast_fn: ForecastFn, test: GridField, catalog: VariableCatalog, stats: NormalizationStats,
             clim: Climatology, a, horizon: int = 60, init_hours=(0, 12), max_inits: int | None = None,
             metadata: dict | None = None) -> MetricReport:
    """Score forecasts from every eligible init time against the test record in physical units.

    RMSE and ACC are computed per init and then averaged over inits.
    """
    idx = init_indices(test, horizon, init_hours, HISTORY, max_inits)
    if not idx:
        raise ShapeError(f"no init time in the test record supports a {horizon}-step horizon")
    key = list(catalog.key_indices)
    z = normalize(test, stats).data
    hist = np.stack([z[t - HISTORY + 1:t + 1] for t in idx])
    hours0 = np.array([hours_since_epoch(test.time_at(t)) for t in idx])
    pred_z = forecast_fn(hist, hours0, horizon)
    mean_k, std_k = stats.mean[key], stats.std[key]
    pred = pred_z * std_k[:, None, None] + mean_k[:, None, None]
    truth = np.stack([test.data[t + 1:t + 1 + horizon, key] for t in idx]).astype(np.float64)
    persist = persistence_forecast(test.data[idx][:, key].astype(np.float64), horizon)
    clim_k = np.stack([clim.for_steps([test.time_at(t + 1 + k) for k in range(horizon)])[:, key] for t in idx])

    def score(p):
        r = rmse_lat(p, truth, a).mean(axis=0).T                     # [c, n]
        ac = acc_lat(p, truth, clim_k, a)
        return r, np.ma.mean(ac, axis=0).T

    rm, ac = score(pred)
    prm, pac = score(persist)
    meta = {"init_times": [test.time_at(t).isoformat() for t in idx],
            "rmse_averaging": "per-init RMSE, then mean over inits"}
    meta.update(metadata or {})
    return MetricReport(
        variables=catalog.key_names,
        lead_hours=test.dt_hours * np.arange(1, horizon + 1),
        rmse=rm, acc=ac, persistence_rmse=prm, persistence_acc=pac,
        n_inits=len(idx), metadata=meta,
    )


# --------------------------------------------------------------------------
# correlation analysis


def _pearson(a: np.ndarray, b: np.ndarray) -> np.ma.MaskedArray:
    """Rows of a vs rows of b; constant rows give masked entries."""
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    den = na[:, None] * nb[None, :]
    undefined = ~(den > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(undefined, 0.0, (a @ b.T) / np.where(undefined, 1.0, den))
    return np.ma.masked_array(np.clip(r, -1.0, 1.0), mask=undefined)


def correlation_matrix(data, catalog: VariableCatalog):
    """Pearson correlation over (time, grid) samples: (key x key, key x all channels)."""
    x = data.data if isinstance(data, GridField) else np.asarray(data)
    if x.shape[0] < 2:
        raise ShapeError("need at least two time samples")
    flat = np.moveaxis(x.astype(np.float64), 1, 0).reshape(x.shape[1], -1)
    keys = flat[list(catalog.key_indices)]
    cross = _pearson(keys, flat)
    self_corr = cross[:, list(catalog.key_indices)]
    return self_corr, cross


# --------------------------------------------------------------------------
# integrated gradients


def integrated_gradients(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                         baseline: torch.Tensor | None = None, steps: int = 32, batch: int = 8) -> torch.Tensor:
    """Midpoint-rule integrated gradients of a scalar-valued ``fn`` along the straight path.

    ``fn`` maps an input shaped like ``x`` with a leading path-batch dimension
    ``[m, *x.shape]`` to ``[m]`` scalars.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    baseline = torch.zeros_like(x) if baseline is None else baseline
    diff = x - baseline
    alphas = (torch.arange(steps, dtype=x.dtype) + 0.5) / steps
    grad_sum = torch.zeros_like(x)
    for s in range(0, steps, batch):
        al = alphas[s:s + batch].reshape(-1, *([1] * x.ndim))
        path = (baseline + al * diff).detach().requires_grad_(True)
        out = fn(path)
        if not out.requires_grad:
            raise TypeError("attribution target does not depend differentiably on its input")
        if out.shape != (path.shape[0],):
            raise ShapeError(f"attribution target must return one scalar per path point, got {tuple(out.shape)}")
        (g,) = torch.autograd.grad(out.sum(), path)
        grad_sum += g.sum(dim=0)
    return diff * grad_sum / steps


def channel_magnitude(ig: torch.Tensor, channel_dim: int = -3) -> np.ndarray:
    """Mean |IG| per channel, averaging every other axis."""
    a = ig.detach().abs().movedim(channel_dim, 0)
    return a.reshape(a.shape[0], -1).mean(dim=1).numpy()


def forecast_target(model, hours_prev, hours_curr, target: str, index: int):
    """Scalar target over a two-step input pair ``[m, 2, C, H, W]``.

    ``target='key'``: grid mean of predicted key variable ``index`` at lead 1.
    ``target='latent'``: grid mean of encoded latent channel ``index`` of the latest step.
    """

    def fn(x):
        m = x.shape[0]
        h = model.encode(x)
        if target == "latent":
            return h[:, 1, index].mean(dim=(-2, -1))
        hp = torch.as_tensor(hours_prev, dtype=torch.float64).expand(m)
        hc = torch.as_tensor(hours_curr, dtype=torch.float64).expand(m)
        nxt = model.lpm_step(h[:, 0], h[:, 1], hp, hc, 1)
        return model.decode(nxt)[:, index].mean(dim=(-2, -1))

    if target not in ("key", "latent"):
        raise ValueError(f"unknown attribution target {target!r}")
    return fn


@dataclass
class AttributionResult:
    target: str
    target_names: list
    magnitudes: np.ndarray        # [n_targets, C]
    completeness_error: np.ndarray  # |sum IG - (F(x) - F(x'))| / |F(x) - F(x')|
    delta: np.ndarray             # F(x) - F(x')

    def top_k(self, channel_names, k: int = 2):
        out = []
        for row in self.magnitudes:
            order = np.argsort(-row)[:k]
            out.append([(channel_names[i], int(i), float(row[i])) for i in order])
        return out


def attribute(model, x_pair: torch.Tensor, hours_prev: float, hours_curr: float, target: str = "key",
              steps: int = 32, baseline: torch.Tensor | None = None, names=None) -> AttributionResult:
    """Attribution of every input channel to each key variable (or latent channel).

    ``x_pair`` is ``[2, C, H, W]`` normalized; the default baseline is zero, i.e.
    the climatological mean in physical units.
    """
    model.eval()
    n_targets = model.cfg.c if target == "key" else model.cfg.d
    baseline = torch.zeros_like(x_pair) if baseline is None else baseline
    mags, errs, deltas = [], [], []
    for j in range(n_targets):
        fn = forecast_target(model, hours_prev, hours_curr, target, j)
        ig = integrated_gradients(fn, x_pair, baseline, steps)
        with torch.no_grad():
            delta = float(fn(x_pair[None])[0] - fn(baseline[None])[0])
        total = float(ig.sum())
        errs.append(abs(total - delta) / abs(delta) if delta != 0 else float("inf"))
        deltas.append(delta)
        mags.append(channel_magnitude(ig, channel_dim=1))
    names = names or [f"{target}{j}" for j in range(n_targets)]
    return AttributionResult(target, list(names), np.stack(mags), np.asarray(errs), np.asarray(deltas))
