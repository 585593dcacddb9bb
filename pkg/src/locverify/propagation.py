"""Empirical distance/latency model.

Speeds are great-circle km per ms of *full* round-trip time.  The central
curve is the saturating family ``v(d) = v_max * d / (d + d_half)``, which
makes the distance-to-time map affine (``t = (d + d_half) / v_max``) and its
inverse closed-form.  Per-bin noise parameters and the lower speed bound are tabulated
over ten logarithmic distance bins between 10 km and 10000 km.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .constants import C_KM_PER_MS, MAX_SPEED

FORMAT = "locverify.propagation"
VERSION = 1

BIN_EDGES_KM = np.logspace(1.0, 4.0, 11)
BIN_CENTERS_KM = np.sqrt(BIN_EDGES_KM[:-1] * BIN_EDGES_KM[1:])
DISTANCE_FLOOR_KM = 1.0
MIN_SAMPLES = 100
MIN_BIN_SAMPLES = 20
MIN_BINS = 3


class ModelError(ValueError):
    """Calibration data cannot support a model."""


@dataclass(frozen=True)
class PropagationSample:
    distance_km: float
    rtt_ms: float

    def __post_init__(self):
        if not self.distance_km >= 0:
            raise ValueError("distance must be non-negative")
        if not self.rtt_ms > 0:
            raise ValueError("rtt must be positive")


def bin_index(distance) -> np.ndarray:
    """Distance bin per value, clamped to the first and last bin."""
    d = np.asarray(distance, dtype=float)
    return np.clip(np.searchsorted(BIN_EDGES_KM, d, side="right") - 1, 0, len(BIN_CENTERS_KM) - 1)


def _interp_log(distance, values: np.ndarray) -> np.ndarray:
    d = np.maximum(np.asarray(distance, dtype=float), DISTANCE_FLOOR_KM)
    return np.interp(np.log(d), np.log(BIN_CENTERS_KM), values)


@dataclass(frozen=True, eq=False)
class PropagationModel:
    """Fitted speed curve plus per-bin tables.

    ``noise_loc``, ``noise_mu`` and ``noise_sigma`` parametrize the slowness
    ``w = f(d) / s`` in each bin as a shifted log-normal,
    ``w = loc + exp(mu + sigma * Z)``.  Every draw is therefore slower than
    the bin's fast edge ``f(d) / loc``, since noise only adds latency.
    """

    v_max: float
    d_half: float
    omega_bins: np.ndarray
    lower_ratio_bins: np.ndarray
    noise_loc: np.ndarray
    noise_mu: np.ndarray
    noise_sigma: np.ndarray
    family: str = "saturating"
    lower_method: str = "fit_ci"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("omega_bins", "lower_ratio_bins", "noise_loc", "noise_mu", "noise_sigma"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != BIN_CENTERS_KM.shape:
                raise ValueError(f"{name} needs one value per bin")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.family not in ("saturating", "constant"):
            raise ValueError(f"unknown family {self.family!r}")
        if not 0 < self.v_max <= MAX_SPEED:
            raise ValueError("v_max must lie in (0, 2c/3]")
        if self.family == "saturating" and not self.d_half > 0:
            raise ValueError("d_half must be positive")
        if np.any(self.omega_bins <= 0):
            raise ValueError("weights must be positive")
        if np.any(self.lower_ratio_bins <= 0) or np.any(self.lower_ratio_bins > 1):
            raise ValueError("lower bound must satisfy 0 < l <= f")

    # forward curve -----------------------------------------------------

    def speed(self, distance) -> np.ndarray:
        d = np.maximum(np.asarray(distance, dtype=float), DISTANCE_FLOOR_KM)
        if self.family == "constant":
            return np.full_like(d, self.v_max)
        return self.v_max * d / (d + self.d_half)

    @property
    def _floor_speed(self) -> float:
        return float(self.speed(DISTANCE_FLOOR_KM))

    def time(self, distance) -> np.ndarray:
        d = np.asarray(distance, dtype=float)
        if self.family == "constant":
            return d / self.v_max
        return np.where(d >= DISTANCE_FLOOR_KM, (d + self.d_half) / self.v_max, d / self._floor_speed)

    def distance(self, rtt) -> np.ndarray:
        t = np.asarray(rtt, dtype=float)
        if np.any(t <= 0):
            raise ValueError("rtt must be positive")
        if self.family == "constant":
            return t * self.v_max
        t_floor = DISTANCE_FLOOR_KM / self._floor_speed
        return np.where(t >= t_floor, self.v_max * t - self.d_half, t * self._floor_speed)

    # tables ------------------------------------------------------------

    def omega(self, distance) -> np.ndarray:
        return _interp_log(distance, self.omega_bins)

    def lower(self, distance) -> np.ndarray:
        return self.speed(distance) * _interp_log(distance, self.lower_ratio_bins)

    def lower_bound(self, distance, tau: float) -> np.ndarray:
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        return self.lower(distance) * (1.0 - tau)

    @property
    def noiseless(self) -> bool:
        return bool(np.all(~np.isfinite(self.noise_mu)))

    def sample_speed(self, distance, rng: np.random.Generator) -> np.ndarray:
        d = np.asarray(distance, dtype=float)
        f = self.speed(d)
        if self.noiseless:
            return np.minimum(f / self.noise_loc[bin_index(d)], MAX_SPEED)
        b = bin_index(d)
        loc, mu, sig = self.noise_loc[b], self.noise_mu[b], self.noise_sigma[b]
        s = f / (loc + np.exp(mu + sig * rng.standard_normal(d.shape)))
        bad = s > MAX_SPEED
        # resample the rare draws above the fiber ceiling (truncation, not clipping)
        while np.any(bad):
            z = rng.standard_normal(int(bad.sum()))
            s[bad] = f[bad] / (loc[bad] + np.exp(mu[bad] + sig[bad] * z))
            bad = s > MAX_SPEED
        return s

    def sample_rtt(self, distance, rng: np.random.Generator) -> np.ndarray:
        d = np.asarray(distance, dtype=float)
        if np.any(d <= 0):
            raise ValueError("distance must be positive")
        return d / self.sample_speed(d, rng)

    # construction ------------------------------------------------------

    @classmethod
    def constant(cls, speed: float, **meta) -> "PropagationModel":
        """Noise-free constant-speed model with unit weights, for oracles and tests."""
        n = len(BIN_CENTERS_KM)
        return cls(
            v_max=float(speed),
            d_half=0.0,
            omega_bins=np.ones(n),
            lower_ratio_bins=np.ones(n),
            noise_loc=np.ones(n),
            noise_mu=np.full(n, -np.inf),
            noise_sigma=np.zeros(n),
            family="constant",
            lower_method="exact",
            meta=dict(meta),
        )

    def to_dict(self) -> dict:
        def arr(a):
            return [None if not np.isfinite(x) else float(x) for x in a]

        return {
            "format": FORMAT,
            "version": VERSION,
            "family": self.family,
            "speed_unit": "km per ms of round-trip time",
            "v_max": float(self.v_max),
            "d_half": float(self.d_half),
            "distance_floor_km": DISTANCE_FLOOR_KM,
            "bin_edges_km": [float(x) for x in BIN_EDGES_KM],
            "omega": arr(self.omega_bins),
            "lower_ratio": arr(self.lower_ratio_bins),
            "lower_method": self.lower_method,
            "noise": {
                "loc": arr(self.noise_loc),
                "mu": arr(self.noise_mu),
                "sigma": arr(self.noise_sigma),
            },
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PropagationModel":
        if doc.get("format") != FORMAT:
            raise ValueError("not a propagation model document")
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        if not np.allclose(doc["bin_edges_km"], BIN_EDGES_KM):
            raise ValueError("bin layout mismatch")

        def arr(xs, fill):
            return np.array([fill if x is None else x for x in xs], dtype=float)

        nz = doc["noise"]
        return cls(
            v_max=doc["v_max"],
            d_half=doc["d_half"],
            omega_bins=arr(doc["omega"], 1.0),
            lower_ratio_bins=arr(doc["lower_ratio"], 1.0),
            noise_loc=arr(nz["loc"], 1.0),
            noise_mu=arr(nz["mu"], -np.inf),
            noise_sigma=arr(nz["sigma"], 0.0),
            family=doc["family"],
            lower_method=doc.get("lower_method", "fit_ci"),
            meta=doc.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PropagationModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# module-level operations ----------------------------------------------------

def speed_at(m: PropagationModel, distance) -> float | np.ndarray:
    out = m.speed(distance)
    return float(out) if np.ndim(out) == 0 else out


def distance_to_time(m: PropagationModel, distance):
    out = m.time(distance)
    return float(out) if np.ndim(out) == 0 else out


def time_to_distance(m: PropagationModel, rtt):
    out = m.distance(rtt)
    return float(out) if np.ndim(out) == 0 else out


def noise_weight(m: PropagationModel, distance):
    out = m.omega(distance)
    return float(out) if np.ndim(out) == 0 else out


def lower_bound_speed(m: PropagationModel, distance, tau: float):
    out = m.lower_bound(distance, tau)
    return float(out) if np.ndim(out) == 0 else out


def sample_rtt(m: PropagationModel, distance, rng: np.random.Generator):
    out = m.sample_rtt(distance, rng)
    return float(out) if np.ndim(out) == 0 else out


def faster_than_light(distance_km, rtt_ms) -> np.ndarray:
    """Mask of samples whose implied speed exceeds c in vacuum."""
    d = np.asarray(distance_km, dtype=float)
    t = np.asarray(rtt_ms, dtype=float)
    return d > C_KM_PER_MS * t


def _family(d, v_max, d_half):
    return v_max * d / (d + d_half)


def build_model(samples, lower_method: str = "fit_ci", confidence: float = 0.95) -> PropagationModel:
    """Fit a model to calibration samples.

    ``samples`` is a sequence of :class:`PropagationSample` or an ``(n, 2)``
    array of ``(distance_km, min_rtt_ms)``.  ``lower_method`` picks how the
    lower speed bound is derived: ``"fit_ci"`` takes the lower end of the
    pointwise confidence band of the fitted curve, ``"percentile"`` takes
    the per-bin ``1 - confidence`` quantile of observed speeds.
    """
    if lower_method not in ("fit_ci", "percentile"):
        raise ValueError(f"unknown lower_method {lower_method!r}")
    arr = np.array(
        [(s.distance_km, s.rtt_ms) for s in samples] if not isinstance(samples, np.ndarray) else samples,
        dtype=float,
    ).reshape(-1, 2)
    d_all, t_all = arr[:, 0], arr[:, 1]
    if np.any(t_all <= 0) or np.any(d_all < 0):
        raise ModelError("samples need distance >= 0 and rtt > 0")
    keep = ~faster_than_light(d_all, t_all) & (d_all > 0)
    d, t = d_all[keep], t_all[keep]
    if len(d) < MIN_SAMPLES:
        raise ModelError(f"only {len(d)} usable samples after filtering, need {MIN_SAMPLES}")
    b = bin_index(d)
    counts = np.bincount(b, minlength=len(BIN_CENTERS_KM))
    populated = np.flatnonzero(counts >= MIN_BIN_SAMPLES)
    if len(populated) < MIN_BINS:
        detail = ", ".join(
            f"[{BIN_EDGES_KM[k]:.0f},{BIN_EDGES_KM[k + 1]:.0f}) km: {counts[k]}" for k in range(len(counts)) if counts[k]
        )
        raise ModelError(f"insufficient bin coverage, need {MIN_BINS} bins with {MIN_BIN_SAMPLES}+ samples; have {detail}")

    s = d / t
    p0 = (min(float(np.max(s)), MAX_SPEED), float(np.median(d)))
    popt, pcov = optimize.curve_fit(
        _family, d, s, p0=p0, bounds=([1e-9, 1e-9], [MAX_SPEED, 1e6]), method="trf", x_scale="jac"
    )
    v_max, d_half = (float(x) for x in popt)
    f = _family(d, v_max, d_half)

    n = len(BIN_CENTERS_KM)
    omega = np.full(n, np.nan)
    lower = np.full(n, np.nan)
    loc = np.full(n, np.nan)
    mu = np.full(n, np.nan)
    sig = np.full(n, np.nan)
    fc = _family(BIN_CENTERS_KM, v_max, d_half)
    if lower_method == "fit_ci":
        z = stats.norm.ppf(0.5 + confidence / 2.0)
        jac = np.column_stack([BIN_CENTERS_KM / (BIN_CENTERS_KM + d_half), -v_max * BIN_CENTERS_KM / (BIN_CENTERS_KM + d_half) ** 2])
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", jac, pcov, jac), 0.0))
        lower_all = np.clip((fc - z * se) / fc, 1e-6, 1.0)
    for k in populated:
        m = b == k
        rel = s[m] / f[m]
        sd = float(np.std(rel, ddof=1))
        omega[k] = 1.0 / max(sd, 1e-9)
        if lower_method == "fit_ci":
            lower[k] = lower_all[k]
        else:
            lower[k] = min(float(np.quantile(rel, 1.0 - confidence)), 1.0)
        w = 1.0 / rel
        if sd < 1e-9:
            loc[k], mu[k], sig[k] = float(np.min(w)), -np.inf, 0.0
        else:
            shape_, loc_, scale_ = stats.lognorm.fit(w)
            if not (0 < loc_ <= np.min(w)) or not np.isfinite(shape_):
                loc_ = float(np.min(w)) * (1 - 1e-6)
                shape_, _, scale_ = stats.lognorm.fit(w, floc=loc_)
            loc[k], mu[k], sig[k] = float(loc_), float(np.log(scale_)), float(shape_)

    # bins without data borrow from the nearest populated bin
    for k in range(n):
        if k not in populated:
            src = populated[np.argmin(np.abs(populated - k))]
            for a in (omega, lower, loc, mu, sig):
                a[k] = a[src]
    # longer links are less noisy, so their weight must not fall below a shorter bin's
    omega = np.maximum.accumulate(omega)
    omega = omega / omega.mean()

    meta = {
        "n_input": int(len(d_all)),
        "n_used": int(len(d)),
        "n_faster_than_light": int(np.sum(faster_than_light(d_all, t_all))),
        "bin_counts": [int(x) for x in counts],
        "fit_covariance": [[float(x) for x in row] for row in pcov],
        "confidence": confidence,
    }
    return PropagationModel(
        v_max=v_max,
        d_half=d_half,
        omega_bins=omega,
        lower_ratio_bins=lower,
        noise_loc=loc,
        noise_mu=mu,
        noise_sigma=sig,
        family="saturating",
        lower_method=lower_method,
        meta=meta,
    )


def read_samples_csv(path) -> np.ndarray:
    """Load ``distance_km, min_rtt_ms`` calibration rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"distance_km", "min_rtt_ms"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"calibration CSV lacks columns: {sorted(missing)}")
        for row in reader:
            rows.append((float(row["distance_km"]), float(row["min_rtt_ms"])))
    return np.array(rows, dtype=float).reshape(-1, 2)


def write_samples_csv(path, samples: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_km", "min_rtt_ms"])
        for d, t in samples:
            w.writerow([repr(float(d)), repr(float(t))])


# synthetic calibration ------------------------------------------------------

@dataclass(frozen=True)
class CalibrationWorld:
    """Generator for synthetic calibration measurements.

    Speeds sit below a saturating fast edge by a slowdown factor
    ``1 + exp(mu(d) + sigma * Z)``, where ``mu`` falls linearly in
    ``log10(d)`` so long links are relatively cleaner.
    """

    edge_v_max: float = 100.0
    edge_d_half: float = 60.0
    mu_at_10km: float = -0.75
    mu_slope: float = -0.35
    sigma: float = 0.9

    def sample(self, n: int, rng: np.random.Generator, d_min: float = 10.0, d_max: float = 10000.0) -> np.ndarray:
        d = np.exp(rng.uniform(np.log(d_min), np.log(d_max), n))
        edge = self.edge_v_max * d / (d + self.edge_d_half)
        mu = self.mu_at_10km + self.mu_slope * (np.log10(d) - 1.0)
        slow = 1.0 + np.exp(mu + self.sigma * rng.standard_normal(n))
        return np.column_stack([d, d / (edge / slow)])


DEFAULT_CALIBRATION_SEED = 20200713
DEFAULT_CALIBRATION_SIZE = 20000


def default_calibration_samples(world: CalibrationWorld | None = None, n: int = DEFAULT_CALIBRATION_SIZE,
                                seed: int = DEFAULT_CALIBRATION_SEED) -> np.ndarray:
    return (world or CalibrationWorld()).sample(n, np.random.default_rng(seed))


_DEFAULT_MODEL: PropagationModel | None = None


def load_default_model() -> PropagationModel:
    global _DEFAULT_MODEL
    if _DEFAULT_MODEL is None:
        text = resources.files("locverify.data").joinpath("default_model.json").read_text()
        _DEFAULT_MODEL = PropagationModel.from_dict(json.loads(text))
    return _DEFAULT_MODEL


def build_default_model(world: CalibrationWorld | None = None, lower_method: str = "fit_ci") -> PropagationModel:
    """Rebuild the packaged default model from its synthetic calibration set."""
    w = world or CalibrationWorld()
    m = build_model(default_calibration_samples(w), lower_method=lower_method)
    m.meta["calibration_world"] = dict(w.__dict__)
    m.meta["calibration_seed"] = DEFAULT_CALIBRATION_SEED
    m.meta["calibration_size"] = DEFAULT_CALIBRATION_SIZE
    return m
