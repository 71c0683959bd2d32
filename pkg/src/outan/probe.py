"""Electrical and optical models of μLEDs and of a multi-shank probe."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar, nnls
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import substream
from .exceptions import FitError, LoadError

OK = "ok"
OPEN = "open"
SHORT = "short"
STATES = (OK, OPEN, SHORT)

# Reference diode: n·Vt and I_s are synthetic; r_series is solved so that the
# forward point is 5 V at 1 mA.
REF_N_VT = 0.08
REF_I_SAT = 1e-19
REF_FORWARD = (1e-3, 5.0)

BISECTION_RTOL = 1e-9


def series_resistance_for(v, i, n_vt=REF_N_VT, i_sat=REF_I_SAT):
    """Series resistance that puts the diode curve through ``(v, i)``."""
    return (v - n_vt * math.log1p(i / i_sat)) / i


@dataclass(frozen=True)
class MicroLedModel:
    i_sat: float = REF_I_SAT
    n_vt: float = REF_N_VT
    r_series: float = field(default_factory=lambda: series_resistance_for(REF_FORWARD[1], REF_FORWARD[0]))
    eta: float = 18.5  # μW per mA
    i_dead: float = 10e-6
    state: str = OK

    def __post_init__(self):
        if not self.i_sat > 0 or not self.n_vt > 0:
            raise ValueError("i_sat and n_vt must be positive")
        if self.r_series < 0 or self.eta < 0 or self.i_dead < 0:
            raise ValueError("r_series, eta and i_dead must be non-negative")
        if self.state not in STATES:
            raise ValueError(f"unknown state {self.state!r}")


def led_voltage(model, i):
    """Forward voltage at current ``i`` (A)."""
    if model.state == OPEN:
        raise LoadError("open μLED: voltage is unbounded for any current")
    if model.state == SHORT:
        return 0.0
    if i < 0:
        raise ValueError("current must be non-negative")
    return model.n_vt * math.log1p(i / model.i_sat) + i * model.r_series


def led_current(model, v):
    """Current drawn at forward voltage ``v``, inverting :func:`led_voltage` by bisection."""
    if model.state == OPEN:
        return 0.0
    if model.state == SHORT:
        raise LoadError("shorted μLED: current is unbounded for any voltage")
    if v < 0:
        raise ValueError("voltage must be non-negative")
    if v == 0:
        return 0.0
    lo, hi = 0.0, 1e-3
    while led_voltage(model, hi) < v:
        hi *= 2.0
    while hi - lo > BISECTION_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if led_voltage(model, mid) < v:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def led_power(model, i):
    """Optical output in μW: flat at zero up to ``i_dead``, then linear."""
    if model.state != OK:
        return 0.0
    return model.eta * max(0.0, i - model.i_dead) * 1e3


def make_failed(model, kind):
    if kind not in (OPEN, SHORT):
        raise ValueError(f"failure kind must be 'open' or 'short', not {kind!r}")
    return replace(model, state=kind)


class DiodeIVRegressor(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``V = n_vt·ln(1 + I/i_sat) + I·r_series``.

    ``X`` holds currents (A), ``y`` voltages (V). The model is linear in
    ``n_vt`` and ``r_series`` once ``i_sat`` is fixed, so ``log(i_sat)`` is
    searched in one dimension and the other two come from a non-negative
    linear solve at each step.
    """

    def __init__(self, log_i_sat_bounds=(-80.0, -5.0)):
        self.log_i_sat_bounds = log_i_sat_bounds

    def _solve_linear(self, log_i_sat, i, v):
        a = np.column_stack([np.log1p(i / math.exp(log_i_sat)), i])
        coef, rnorm = nnls(a, v)
        return coef, rnorm

    def fit(self, X, y):
        i = np.asarray(X, dtype=float).reshape(-1)
        v = np.asarray(y, dtype=float).reshape(-1)
        if i.shape != v.shape:
            raise ValueError("X and y must have the same number of samples")
        if i.size < 3:
            raise FitError(f"need at least 3 (V, I) points, got {i.size}")
        if np.any(i <= 0):
            raise FitError("currents must be positive")
        if np.unique(i).size != i.size:
            raise FitError("currents must be distinct")
        order = np.argsort(i)
        if np.any(np.diff(v[order]) <= 0):
            raise FitError("I-V points are not monotone")

        lo, hi = self.log_i_sat_bounds
        grid = np.linspace(lo, hi, 301)
        costs = [self._solve_linear(g, i, v)[1] for g in grid]
        k = int(np.argmin(costs))
        bracket = (grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)])
        res = minimize_scalar(
            lambda g: self._solve_linear(g, i, v)[1],
            bounds=bracket,
            method="bounded",
            options={"xatol": 1e-12},
        )
        (n_vt, r_series), _ = self._solve_linear(res.x, i, v)
        if n_vt <= 0:
            raise FitError("fit collapsed to a purely resistive load")
        self.i_sat_ = math.exp(res.x)
        self.n_vt_ = float(n_vt)
        self.r_series_ = float(r_series)
        self.rms_ = float(np.sqrt(np.mean((self.predict(i) - v) ** 2)))
        return self

    def predict(self, X):
        check_is_fitted(self, "i_sat_")
        i = np.asarray(X, dtype=float).reshape(-1)
        return self.n_vt_ * np.log1p(i / self.i_sat_) + i * self.r_series_

    def to_model(self, **optical):
        check_is_fitted(self, "i_sat_")
        return MicroLedModel(i_sat=self.i_sat_, n_vt=self.n_vt_, r_series=self.r_series_, **optical)


def fit_iv(points):
    """Fit the diode-plus-resistor model to ``(V, I)`` pairs.

    Returns ``(i_sat, n_vt, r_series, rms)``; ``rms`` is the voltage residual.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FitError("points must be a sequence of (V, I) pairs")
    reg = DiodeIVRegressor().fit(pts[:, 1], pts[:, 0])
    return reg.i_sat_, reg.n_vt_, reg.r_series_, reg.rms_


# Spread of the default probe population. r_series bounds put the current at
# 4.6 V between 0.64 and 0.85 mA.
R_SERIES_RANGE = (series_resistance_for(4.6, 0.85e-3), series_resistance_for(4.6, 0.64e-3))
ETA_RANGE = (19.0, 20.2)
I_DEAD_RANGE = (5e-6, 20e-6)


@dataclass
class ProbeModel:
    """μLEDs on a common-cathode probe and their ASIC channel bindings.

    LED ids are ``"L<shank>.<index>"`` counted from 1. ``channel_map`` maps an
    ASIC channel to the one LED it drives.
    """

    shanks: int = 4
    leds_per_shank: int = 3
    leds: dict = field(default_factory=dict)
    channel_map: dict = field(default_factory=dict)

    def __post_init__(self):
        targets = list(self.channel_map.values())
        if len(set(targets)) != len(targets):
            raise ValueError("channel_map must bind each μLED to at most one channel")
        for ch, led in self.channel_map.items():
            if not 0 <= int(ch) < 32:
                raise ValueError(f"channel {ch} outside 0..31")
            if led not in self.leds:
                raise ValueError(f"channel {ch} bound to unknown μLED {led!r}")

    @staticmethod
    def led_id(shank, index):
        return f"L{shank}.{index}"

    def led_ids(self):
        return [self.led_id(s, k) for s in range(1, self.shanks + 1) for k in range(1, self.leds_per_shank + 1)]

    def load(self, channel):
        """The μLED model driven by ``channel``, or ``None`` when nothing is connected."""
        led = self.channel_map.get(int(channel))
        return None if led is None else self.leds[led]

    def channel_of(self, led):
        for ch, name in self.channel_map.items():
            if name == led:
                return ch
        raise KeyError(led)

    @property
    def connected_channels(self):
        return sorted(self.channel_map)

    def neighbours(self, channel):
        """Channels whose μLEDs sit next to this channel's μLED on the same shank."""
        led = self.channel_map.get(int(channel))
        if led is None:
            return []
        shank, index = (int(x) for x in led[1:].split("."))
        out = []
        for other in (index - 1, index + 1):
            name = self.led_id(shank, other)
            try:
                out.append(self.channel_of(name))
            except KeyError:
                pass
        return sorted(out)

    def rebind(self, channel, led):
        mapping = {ch: name for ch, name in self.channel_map.items() if name != led}
        if led is None:
            mapping.pop(int(channel), None)
        else:
            mapping[int(channel)] = led
        return replace(self, channel_map=mapping)

    def with_led(self, led, model):
        return replace(self, leds={**self.leds, led: model})

    def to_dict(self):
        return {
            "shanks": self.shanks,
            "leds_per_shank": self.leds_per_shank,
            "leds": {name: asdict(m) for name, m in self.leds.items()},
            "channel_map": {str(ch): led for ch, led in sorted(self.channel_map.items())},
        }

    @classmethod
    def from_dict(cls, d):
        leds = {}
        for name, entry in d["leds"].items():
            entry = dict(entry)
            points = entry.pop("iv_points", None)
            if points is not None:
                i_sat, n_vt, r_series, _ = fit_iv(points)
                entry.update(i_sat=i_sat, n_vt=n_vt, r_series=r_series)
            leds[name] = MicroLedModel(**entry)
        return cls(
            shanks=int(d.get("shanks", 4)),
            leds_per_shank=int(d.get("leds_per_shank", 3)),
            leds=leds,
            channel_map={int(ch): led for ch, led in d.get("channel_map", {}).items()},
        )


def make_probe(seed=0, shanks=4, leds_per_shank=3, r_range=R_SERIES_RANGE, eta_range=ETA_RANGE,
               i_dead_range=I_DEAD_RANGE):
    """Synthetic probe with per-LED parameters drawn from seeded uniform ranges.

    LEDs are bound to channels 0, 1, 2, ... in shank-major order.
    """
    rng = substream(seed, "probe")
    probe = ProbeModel(shanks, leds_per_shank)
    names = probe.led_ids()
    if len(names) > 32:
        raise ValueError("a probe cannot have more μLEDs than ASIC channels")
    r = rng.uniform(*r_range, len(names))
    eta = rng.uniform(*eta_range, len(names))
    i_dead = rng.uniform(*i_dead_range, len(names))
    leds = {
        name: MicroLedModel(r_series=float(r[k]), eta=float(eta[k]), i_dead=float(i_dead[k]))
        for k, name in enumerate(names)
    }
    return ProbeModel(shanks, leds_per_shank, leds, {k: name for k, name in enumerate(names)})


def load_probe(path):
    with open(path) as fh:
        return ProbeModel.from_dict(json.load(fh))


def save_probe(probe, path):
    with open(path, "w") as fh:
        json.dump(probe.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


IP_HEADER = ["channel", "code", "current_a", "power_uw", "current_cv", "power_cv"]


@dataclass
class IPCurve:
    """Per-code mean current, mean optical power and their coefficients of variation."""

    channel: int
    codes: np.ndarray
    current: np.ndarray
    power: np.ndarray
    current_cv: np.ndarray
    power_cv: np.ndarray
    reps: int = 1

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=int)
        for name in ("current", "power", "current_cv", "power_cv"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(np.diff(self.codes) <= 0):
            raise ValueError("codes must be strictly increasing")

    @property
    def dead(self):
        return not np.any(self.power > 0)

    @property
    def max_power(self):
        return float(self.power.max())


def write_ip_curves(curves, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(IP_HEADER)
    for c in curves:
        for k in range(len(c.codes)):
            w.writerow([c.channel, int(c.codes[k]), repr(float(c.current[k])), repr(float(c.power[k])),
                        repr(float(c.current_cv[k])), repr(float(c.power_cv[k]))])


def read_ip_curves(fh, reps=1):
    rows = {}
    reader = csv.DictReader(fh)
    if reader.fieldnames != IP_HEADER:
        raise ValueError(f"expected header {','.join(IP_HEADER)}")
    for row in reader:
        rows.setdefault(int(row["channel"]), []).append(row)
    curves = []
    for ch, rs in sorted(rows.items()):
        curves.append(IPCurve(
            ch,
            [int(r["code"]) for r in rs],
            [float(r["current_a"]) for r in rs],
            [float(r["power_uw"]) for r in rs],
            [float(r["current_cv"]) for r in rs],
            [float(r["power_cv"]) for r in rs],
            reps,
        ))
    return curves


def ip_curves_to_csv(curves):
    buf = io.StringIO()
    write_ip_curves(curves, buf)
    return buf.getvalue()
