"""Gridded data container, variable catalog, statistics and on-disk format.

Arrays are always ordered ``[time, channel, lat, lon]``. The canonical on-disk
format is a directory holding ``manifest.json`` plus one little-endian float32
file per channel, each stored C-order as ``[time, lat, lon]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    CatalogError,
    DataError,
    DegenerateChannelError,
    IngestionError,
    InvalidGridError,
    ShapeError,
)

EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)

PRESSURE_LEVELS = (50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000)
UPPER_AIR_VARIABLES = ("z", "t", "rh", "u", "v", "w", "ws")

# Order of the 13 single-level inputs. Key variables sit at fixed positions;
# the others fill the remaining slots.
SURFACE_VARIABLES = (
    ("tp6h", "surface"),
    ("u10m", "surface"),
    ("v10m", "surface"),
    ("ws10m", "surface"),
    ("t2m", "surface"),
    ("mslp", "surface"),
    ("sp", "surface"),
    ("tisr", "surface"),
    ("tisr6h", "surface"),
    ("tisr12h", "surface"),
    ("tcc", "surface"),
    ("tcwv", "integrated"),
    ("tp12h", "surface"),
)

PAPER_KEY_VARIABLES = (
    "u10m", "v10m", "t2m", "sp", "mslp",
    "u1000", "v1000", "z1000",
    "t850", "u850", "v850", "z850", "rh850",
    "t500", "u500", "v500", "z500", "rh500",
    "z50",
    "tcwv",
)


def utc(ts) -> datetime:
    """Coerce an ISO string or datetime to an aware UTC datetime."""
    if isinstance(ts, str):
        ts = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def hours_since_epoch(ts) -> float:
    return (utc(ts) - EPOCH).total_seconds() / 3600.0


@dataclass(frozen=True)
class VariableCatalog:
    names: tuple
    levels: tuple
    key_indices: tuple
    surface_flags: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "key_indices", tuple(int(i) for i in self.key_indices))
        object.__setattr__(self, "surface_flags", tuple(bool(s) for s in self.surface_flags))
        C = len(self.names)
        if len(self.levels) != C or len(self.surface_flags) != C:
            raise CatalogError(
                f"catalog has {C} names, {len(self.levels)} levels and "
                f"{len(self.surface_flags)} surface flags"
            )
        if len(set(self.names)) != C:
            raise CatalogError("channel names must be unique")
        if not self.key_indices:
            raise CatalogError("catalog needs at least one key variable")
        if len(set(self.key_indices)) != len(self.key_indices):
            raise CatalogError(f"duplicate key indices {self.key_indices}")
        bad = [i for i in self.key_indices if not 0 <= i < C]
        if bad:
            raise CatalogError(f"key indices {bad} outside [0, {C})")

    @property
    def C(self) -> int:
        return len(self.names)

    @property
    def c(self) -> int:
        return len(self.key_indices)

    @property
    def key_names(self) -> list:
        return [self.names[i] for i in self.key_indices]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def figure_index(self, name: str) -> int:
        """1-based channel position, as used on plot axes."""
        return self.index(name) + 1

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "levels": list(self.levels),
            "key_indices": list(self.key_indices),
            "surface_flags": list(self.surface_flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableCatalog":
        return cls(d["names"], d["levels"], d["key_indices"], d["surface_flags"])


def paper_catalog() -> VariableCatalog:
    """The 104-channel layout: 13 single-level inputs then 7 variables x 13 levels."""
    names, levels, surface = [], [], []
    for name, level in SURFACE_VARIABLES:
        names.append(name)
        levels.append(level)
        surface.append(True)
    for var in UPPER_AIR_VARIABLES:
        for p in PRESSURE_LEVELS:
            names.append(f"{var}{p}")
            levels.append(p)
            surface.append(False)
    key = [names.index(k) for k in PAPER_KEY_VARIABLES]
    return VariableCatalog(names, levels, key, surface)


@dataclass
class GridField:
    data: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    t0: datetime = EPOCH
    dt_hours: float = 6.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.t0 = utc(self.t0)
        if self.data.ndim != 4:
            raise ShapeError(f"GridField data must be [T, C, H, W], got shape {self.data.shape}")
        T, C, H, W = self.data.shape
        if self.lat.shape != (H,) or self.lon.shape != (W,):
            raise ShapeError(
                f"coordinate lengths lat={self.lat.shape} lon={self.lon.shape} "
                f"do not match grid {H}x{W}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    def time_at(self, t: int) -> datetime:
        return self.t0 + timedelta(hours=self.dt_hours * t)

    def hours(self) -> np.ndarray:
        """Hours since the embedding epoch for every step."""
        return hours_since_epoch(self.t0) + self.dt_hours * np.arange(self.n_steps)

    def slice_time(self, start: int, stop: int) -> "GridField":
        if not 0 <= start < stop <= self.n_steps:
            raise DataError(f"time slice [{start}, {stop}) outside [0, {self.n_steps})")
        return replace(self, data=self.data[start:stop], t0=self.time_at(start))


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise DegenerateChannelError("normalization std must be positive for every channel")


@dataclass(frozen=True)
class Climatology:
    mean_field: np.ndarray
    mode: str = "simple"

    def for_steps(self, field_times: Sequence[datetime]) -> np.ndarray:
        """Reference field for each timestamp, stacked [T, C, H, W]."""
        if self.mode == "simple":
            return np.broadcast_to(self.mean_field, (len(field_times),) + self.mean_field.shape)
        doy = [utc(t).timetuple().tm_yday - 1 for t in field_times]
        return self.mean_field[doy]


def grid_latitudes(H: int) -> np.ndarray:
    """Cell-centre latitudes, south to north, no pole rows."""
    step = 180.0 / H
    return -90.0 + step / 2 + step * np.arange(H)


def grid_longitudes(W: int) -> np.ndarray:
    return 360.0 / W * np.arange(W)


def latitude_weights(lats) -> np.ndarray:
    lats = np.asarray(lats, dtype=np.float64)
    if lats.ndim != 1 or lats.size == 0:
        raise InvalidGridError("latitudes must be a non-empty 1-D array")
    if np.any(np.abs(lats) >= 90.0):
        raise InvalidGridError(f"latitudes must be cell centres strictly inside (-90, 90), got {lats}")
    c = np.cos(np.deg2rad(lats))
    return c / c.mean()


def compute_stats(train: GridField, catalog: VariableCatalog | None = None) -> NormalizationStats:
    x = train.data
    if x.shape[0] < 2:
        raise DataError("need at least two time steps to compute normalization statistics")
    x = x.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    dead = np.flatnonzero(~(std > 0))
    if dead.size:
        names = [catalog.names[i] if catalog else f"channel {i}" for i in dead]
        raise DegenerateChannelError(f"constant channel(s) {', '.join(map(str, names))} have zero std")
    return NormalizationStats(mean, std)


def _check_channels(x: GridField, s: NormalizationStats):
    if x.data.shape[1] != len(s.mean):
        raise ShapeError(f"field has {x.data.shape[1]} channels but stats cover {len(s.mean)}")


def normalize(x: GridField, s: NormalizationStats) -> GridField:
    _check_channels(x, s)
    z = (x.data - s.mean[None, :, None, None]) / s.std[None, :, None, None]
    return replace(x, data=z.astype(x.data.dtype, copy=False))


def denormalize(x: GridField, s: NormalizationStats) -> GridField:
    _check_channels(x, s)
    y = x.data * s.std[None, :, None, None] + s.mean[None, :, None, None]
    return replace(x, data=y.astype(x.data.dtype, copy=False))


def compute_climatology(train: GridField, mode: str = "simple") -> Climatology:
    x = train.data
    if x.shape[0] < 1:
        raise DataError("empty training range")
    if mode == "simple":
        return Climatology(x.astype(np.float64).mean(axis=0), "simple")
    if mode != "seasonal":
        raise DataError(f"unknown climatology mode {mode!r}")
    T = x.shape[0]
    doy = np.array([train.time_at(t).timetuple().tm_yday - 1 for t in range(T)])
    sums = np.zeros((366,) + x.shape[1:])
    counts = np.bincount(doy, minlength=366).astype(np.float64)
    np.add.at(sums, doy, x.astype(np.float64))
    overall = x.astype(np.float64).mean(axis=0)
    clim = np.where(counts[:, None, None, None] > 0, sums / np.maximum(counts, 1)[:, None, None, None], overall)
    return Climatology(clim, "seasonal")


def select_key(x: GridField, cat: VariableCatalog) -> GridField:
    if x.data.shape[1] != cat.C:
        raise ShapeError(f"field has {x.data.shape[1]} channels, catalog expects {cat.C}")
    return replace(x, data=x.data[:, list(cat.key_indices)])


def split_field(x: GridField, fractions=(0.8, 0.1)):
    """Chronological train/val/test split by fraction of the record."""
    T = x.n_steps
    n_train = int(round(fractions[0] * T))
    n_val = int(round(fractions[1] * T))
    if n_train < 2 or n_train + n_val >= T:
        raise DataError(f"split fractions {fractions} leave an empty split for T={T}")
    return (
        x.slice_time(0, n_train),
        x.slice_time(n_train, n_train + n_val) if n_val else None,
        x.slice_time(n_train + n_val, T),
    )


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the toy atmosphere.

    Each step shifts every channel one cell east (periodic), then applies
    diffusion, pulls each key channel toward the mean of its driver channels
    (``coupling``), damps, and adds smooth noise plus a one-day cycle. With
    ``coupling = diffusion = damping = forcing = cycle = 0`` the evolution is a
    pure one-cell zonal shift.
    """

    C: int = 12
    c: int = 4
    H: int = 16
    W: int = 32
    T: int = 2000
    coupling: float = 0.5
    diffusion: float = 0.1
    damping: float = 0.05
    forcing: float = 0.3
    cycle: float = 0.2
    noise_sigma: float = 1.5
    seed: int = 0
    dt_hours: float = 6.0
    t0: str = "2000-01-01T00:00:00+00:00"
    spinup: int = 50


def synthetic_key_indices(C: int, c: int) -> list:
    return [int(k * C // c) for k in range(c)]


def synthetic_drivers(C: int, c: int) -> dict:
    """Map each key channel to the non-key channels that force it."""
    keys = synthetic_key_indices(C, c)
    bounds = keys + [C]
    drivers = {}
    for m, k in enumerate(keys):
        own = list(range(k + 1, bounds[m + 1]))
        if not own and c > 1:
            own = [keys[(m + 1) % c]]
        if own:
            drivers[k] = own
    return drivers


def synthetic_catalog(C: int, c: int) -> VariableCatalog:
    if c > C:
        raise CatalogError(f"cannot designate {c} key variables among {C} channels")
    if c < 1:
        raise CatalogError("need at least one key variable")
    tags = ["surface", 850, 500, 250]
    levels = [tags[i % 4] for i in range(C)]
    names = [f"x{i:02d}" for i in range(C)]
    return VariableCatalog(names, levels, synthetic_key_indices(C, c), [lv == "surface" for lv in levels])


def _laplacian(y: np.ndarray) -> np.ndarray:
    """5-point Laplacian; periodic in lon, reflecting (zero-flux) in lat."""
    north = np.concatenate([y[..., 1:, :], y[..., -1:, :]], axis=-2)
    south = np.concatenate([y[..., :1, :], y[..., :-1, :]], axis=-2)
    east = np.roll(y, -1, axis=-1)
    west = np.roll(y, 1, axis=-1)
    return north + south + east + west - 4.0 * y


def _smooth_noise(rng, shape, sigma):
    n = rng.standard_normal(shape)
    if sigma > 0:
        n = gaussian_filter(n, sigma=(0, sigma, sigma), mode=("nearest", "reflect", "wrap"))
        n /= n.std() + 1e-12
    return n


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()):
    """Deterministic synthetic dataset; returns ``(GridField, VariableCatalog)``."""
    catalog = synthetic_catalog(cfg.C, cfg.c)
    if cfg.H < 4 or cfg.W < 4:
        raise DataError(f"grid {cfg.H}x{cfg.W} too small (need H, W >= 4)")
    if cfg.T < 16:
        raise DataError(f"need T >= 16 steps, got {cfg.T}")
    rng = np.random.default_rng(cfg.seed)
    C, H, W = cfg.C, cfg.H, cfg.W
    drivers = synthetic_drivers(C, cfg.c)
    pattern = _smooth_noise(rng, (C, H, W), cfg.noise_sigma)
    # driven key channels get no direct noise: their next state is a function of the full set
    forcing_mask = np.ones((C, 1, 1))
    forcing_mask[list(drivers)] = 0.0
    offsets = rng.uniform(-50.0, 300.0, size=C)
    scales = rng.uniform(0.5, 50.0, size=C)
    z = _smooth_noise(rng, (C, H, W), cfg.noise_sigma)
    out = np.empty((cfg.T, C, H, W), dtype=np.float64)
    for t in range(-cfg.spinup, cfg.T):
        if t >= 0:
            out[t] = z
        y = np.roll(z, 1, axis=-1)
        if cfg.diffusion:
            y = y + cfg.diffusion * _laplacian(y)
        if cfg.coupling:
            mixed = y.copy()
            for k, drv in drivers.items():
                mixed[k] = (1 - cfg.coupling) * y[k] + cfg.coupling * y[drv].mean(axis=0)
            y = mixed
        if cfg.damping:
            y = (1 - cfg.damping) * y
        if cfg.forcing:
            y = y + cfg.forcing * forcing_mask * _smooth_noise(rng, (C, H, W), cfg.noise_sigma)
        if cfg.cycle:
            phase = 2 * math.pi * (t + 1) * cfg.dt_hours / 24.0
            y = y + cfg.cycle * math.sin(phase) * pattern
        z = y
    data = (out * scales[None, :, None, None] + offsets[None, :, None, None]).astype(np.float32)
    field_ = GridField(data, grid_latitudes(H), grid_longitudes(W), utc(cfg.t0), cfg.dt_hours)
    return field_, catalog


def synthetic_constants(lat, lon) -> np.ndarray:
    """Two analytic constant fields: a land-mask-like blob and sin(latitude)."""
    la, lo = np.meshgrid(np.asarray(lat), np.asarray(lon), indexing="ij")
    blob = (((la - 20.0) / 35.0) ** 2 + ((lo - 120.0) / 70.0) ** 2 < 1.0) | (
        ((la + 30.0) / 25.0) ** 2 + ((lo - 290.0) / 40.0) ** 2 < 1.0
    )
    return np.stack([blob.astype(np.float32), np.sin(np.deg2rad(la)).astype(np.float32)])


# --------------------------------------------------------------------------
# on-disk format

MANIFEST = "manifest.json"


def _channel_file(name: str) -> str:
    return f"{name}.f32"


def save_dataset(x: GridField, cat: VariableCatalog, out_dir, constants: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T, C, H, W = x.data.shape
    if C != cat.C:
        raise ShapeError(f"field has {C} channels, catalog has {cat.C}")
    key_pos = {idx: pos for pos, idx in enumerate(cat.key_indices)}
    channels = []
    for i, name in enumerate(cat.names):
        np.ascontiguousarray(x.data[:, i], dtype="<f4").tofile(out / _channel_file(name))
        channels.append({
            "name": name,
            "level": cat.levels[i],
            "surface": cat.surface_flags[i],
            "key_index": key_pos.get(i),
            "file": _channel_file(name),
        })
    manifest = {
        "dims": {"time": T, "channel": C, "lat": H, "lon": W},
        "dt_hours": x.dt_hours,
        "t0": x.t0.isoformat(),
        "lat": x.lat.tolist(),
        "lon": x.lon.tolist(),
        "channels": channels,
    }
    if constants:
        manifest["constants"] = []
        for name, arr in constants.items():
            fname = f"const_{name}.f32"
            np.ascontiguousarray(arr, dtype="<f4").tofile(out / fname)
            manifest["constants"].append({"name": name, "file": fname})
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out


def _read_manifest(root: Path) -> dict:
    path = root / MANIFEST if root.is_dir() else root
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IngestionError(f"manifest {path} is not valid JSON: {e}") from e
    for key in ("dims", "dt_hours", "t0", "lat", "lon", "channels"):
        if key not in m:
            raise IngestionError(f"manifest {path} missing field {key!r}")
    return m


def catalog_from_manifest(m: dict) -> VariableCatalog:
    chans = m["channels"]
    keyed = sorted(
        ((ch["key_index"], i) for i, ch in enumerate(chans) if ch.get("key_index") is not None),
        key=lambda p: p[0],
    )
    if [p for p, _ in keyed] != list(range(len(keyed))):
        raise IngestionError(f"key_index values must be 0..c-1 without gaps, got {[p for p, _ in keyed]}")
    return VariableCatalog(
        [ch["name"] for ch in chans],
        [ch["level"] for ch in chans],
        [i for _, i in keyed],
        [bool(ch.get("surface", False)) for ch in chans],
    )


def load_dataset(manifest_path):
    """Read a dataset directory (or its manifest path); returns ``(GridField, VariableCatalog)``."""
    p = Path(manifest_path)
    root = p if p.is_dir() else p.parent
    m = _read_manifest(p)
    dims = m["dims"]
    T, H, W = int(dims["time"]), int(dims["lat"]), int(dims["lon"])
    if len(m["lat"]) != H or len(m["lon"]) != W:
        raise IngestionError(
            f"manifest dims lat={H}, lon={W} disagree with coordinate lists "
            f"({len(m['lat'])}, {len(m['lon'])})"
        )
    if "channel" in dims and int(dims["channel"]) != len(m["channels"]):
        raise IngestionError(
            f"manifest dims declare {dims['channel']} channels but the channel list has "
            f"{len(m['channels'])} entries"
        )
    cat = catalog_from_manifest(m)
    data = np.empty((T, cat.C, H, W), dtype=np.float32)
    for i, ch in enumerate(m["channels"]):
        f = root / ch.get("file", _channel_file(ch["name"]))
        if not f.exists():
            raise IngestionError(f"missing data file for channel {ch['name']!r}: {f}")
        raw = np.fromfile(f, dtype="<f4")
        if raw.size != T * H * W:
            raise IngestionError(
                f"channel {ch['name']!r}: file holds {raw.size} values, expected "
                f"time*lat*lon = {T}*{H}*{W} = {T * H * W}"
            )
        data[:, i] = raw.reshape(T, H, W)
    bad = ~np.isfinite(data)
    if bad.any():
        t, c, _, _ = np.argwhere(bad)[0]
        raise IngestionError(
            f"{int(bad.sum())} non-finite values; first at time {t}, channel {cat.names[c]!r}"
        )
    lat = np.asarray(m["lat"], dtype=np.float64)
    lon = np.asarray(m["lon"], dtype=np.float64)
    if np.any(np.diff(lon) <= 0):
        raise IngestionError("longitudes must be strictly increasing")
    return GridField(data, lat, lon, utc(m["t0"]), float(m["dt_hours"])), cat


def load_constants(manifest_path):
    """Constant fields listed in the manifest, or analytic ones when none are stored."""
    p = Path(manifest_path)
    root = p if p.is_dir() else p.parent
    m = _read_manifest(p)
    H, W = int(m["dims"]["lat"]), int(m["dims"]["lon"])
    if not m.get("constants"):
        return synthetic_constants(m["lat"], m["lon"])
    arrs = []
    for ent in m["constants"]:
        raw = np.fromfile(root / ent["file"], dtype="<f4")
        if raw.size != H * W:
            raise IngestionError(f"constant {ent['name']!r} holds {raw.size} values, expected {H * W}")
        arrs.append(raw.reshape(H, W))
    return np.stack(arrs)
