"""Per-probe optical calibration: I-P sweeps, power→code tables, DNL/INL."""
import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._rng import substream
from .asic import FULLY_ON, code_response, observe
from .exceptions import CalibrationError, OutOfRangeError, PowerStateError
from .probe import IPCurve
from .protocol import N_CHANNELS, N_CODES

N_ROWS = 1024


def _cv(samples):
    mean = samples.mean(axis=-1)
    sd = samples.std(axis=-1, ddof=1) if samples.shape[-1] > 1 else np.zeros_like(mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = np.where(mean != 0, sd / np.abs(mean), 0.0)
    return mean, cv


def measure_ip_curves(asic, probe, reps=9, seed=0, rng=None):
    """Sweep every code on every connected channel and record mean and CV.

    Each observation of current and optical power carries independent
    multiplicative noise with CV ``asic.noise_cv``.
    """
    if asic.power != FULLY_ON:
        raise PowerStateError(f"cannot measure: ASIC is {asic.power}")
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if rng is None:
        rng = substream(seed, "measurement")
    codes = np.arange(N_CODES)
    curves = []
    for ch in probe.connected_channels:
        current, power, _ = code_response(asic, ch, probe.load(ch))
        i_mean, i_cv = _cv(observe(current, asic.noise_cv, reps, rng))
        p_mean, p_cv = _cv(observe(power, asic.noise_cv, reps, rng))
        curves.append(IPCurve(ch, codes, i_mean, p_mean, i_cv, p_cv, reps))
    return curves


@dataclass(frozen=True)
class CalibrationTable:
    target_max_power: float  # μW
    entries: np.ndarray  # (N_ROWS, N_CHANNELS) codes
    dead: tuple = ()

    @property
    def lsb(self):
        return self.target_max_power / N_ROWS

    @property
    def rows(self):
        return np.arange(N_ROWS) * self.lsb

    def row_for(self, desired):
        if desired < 0:
            raise OutOfRangeError(f"desired power {desired} μW is negative")
        if desired > self.target_max_power * (1 + 1e-12):
            raise OutOfRangeError(
                f"desired power {desired} μW exceeds calibrated maximum {self.target_max_power} μW"
            )
        # Nearest row; exact halves go to the lower row.
        row = math.ceil(desired / self.lsb - 0.5)
        return min(max(row, 0), N_ROWS - 1)

    def lookup(self, channel, desired):
        return int(self.entries[self.row_for(desired), channel])

    def lookup_many(self, channels, desired):
        """Vectorized :meth:`lookup` over paired arrays."""
        desired = np.asarray(desired, dtype=float)
        if desired.size and (desired.min() < 0 or desired.max() > self.target_max_power * (1 + 1e-12)):
            raise OutOfRangeError(f"desired power outside 0..{self.target_max_power} μW")
        rows = np.clip(np.ceil(desired / self.lsb - 0.5).astype(int), 0, N_ROWS - 1)
        return self.entries[rows, np.asarray(channels, dtype=int)]


def lookup(table, channel, desired):
    """Code that produced the output nearest ``desired`` μW on ``channel``."""
    return table.lookup(channel, desired)


def nearest_codes(power, targets, chunk=256):
    """Index of the sample in ``power`` nearest each target; ties go to the lower index."""
    power = np.asarray(power, dtype=float)
    targets = np.asarray(targets, dtype=float)
    out = np.empty(targets.size, dtype=int)
    for a in range(0, targets.size, chunk):
        # argmin returns the first minimum, which is the lowest code.
        out[a:a + chunk] = np.abs(power[None, :] - targets[a:a + chunk, None]).argmin(axis=1)
    return out


class PowerCalibrator(TransformerMixin, BaseEstimator):
    """Learns a 1024-row power→code table from measured I-P curves.

    All channels are calibrated to the weakest live channel's maximum,
    rounded down to ``granularity`` μW. ``transform`` maps an
    ``(n_samples, n_channels)`` array of desired powers to DAC codes.
    """

    def __init__(self, granularity=1.0, n_channels=N_CHANNELS):
        self.granularity = granularity
        self.n_channels = n_channels

    def fit(self, curves, y=None):
        curves = list(curves)
        live = [c for c in curves if not c.dead]
        if not live:
            raise CalibrationError("every channel is dead; nothing to calibrate")
        weakest = min(c.max_power for c in live)
        target = math.floor(weakest / self.granularity + 1e-9) * self.granularity
        if target <= 0:
            raise CalibrationError(f"weakest channel maximum {weakest} μW rounds to zero")
        entries = np.zeros((N_ROWS, self.n_channels), dtype=int)
        desired = np.arange(N_ROWS) * target / N_ROWS
        for c in live:
            entries[:, c.channel] = c.codes[nearest_codes(c.power, desired)]
        self.table_ = CalibrationTable(target, entries, tuple(sorted(c.channel for c in curves if c.dead)))
        self.target_max_power_ = target
        self.lsb_ = self.table_.lsb
        self.weakest_max_power_ = weakest
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} columns, got {X.shape[1]}")
        chans = np.broadcast_to(np.arange(self.n_channels), X.shape)
        return self.table_.lookup_many(chans.ravel(), X.ravel()).reshape(X.shape)

    def lookup(self, channel, desired):
        check_is_fitted(self, "table_")
        return self.table_.lookup(channel, desired)


def build_table(curves, granularity=1.0):
    return PowerCalibrator(granularity=granularity).fit(curves).table_


@dataclass(frozen=True)
class LinearityReport:
    channel: int
    dnl: np.ndarray
    inl: np.ndarray
    phase: str  # "pre" | "post"


def linearity(response, lsb, channel=-1, phase="pre"):
    """DNL and INL of an ordered response, in LSB units."""
    p = np.asarray(response, dtype=float)
    if p.size < 2:
        raise ValueError("need at least 2 response samples")
    dnl = np.diff(p) / lsb - 1.0
    inl = (p - np.arange(p.size) * lsb) / lsb
    return LinearityReport(channel, dnl, inl, phase)


def calibrated_response(table, curve):
    """Measured power at each row's table entry for one channel."""
    power_by_code = dict(zip(curve.codes.tolist(), curve.power.tolist()))
    return np.array([power_by_code[int(c)] for c in table.entries[:, curve.channel]])


def linearity_reports(table, curves):
    """Pre- and post-calibration reports for every live channel.

    The pre-calibration response is the raw power with row index used
    directly as the code.
    """
    out = []
    for c in curves:
        if c.dead:
            continue
        out.append(linearity(c.power[:N_ROWS], table.lsb, c.channel, "pre"))
        out.append(linearity(calibrated_response(table, c), table.lsb, c.channel, "post"))
    return out


def write_table(table, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["target_max_power_uw", repr(table.target_max_power), "lsb_uw", repr(table.lsb),
                "dead", " ".join(str(d) for d in table.dead)])
    w.writerow(["row"] + [f"ch{k}" for k in range(table.entries.shape[1])])
    for r in range(N_ROWS):
        w.writerow([r] + [int(c) for c in table.entries[r]])


def read_table(fh):
    reader = csv.reader(fh)
    meta = next(reader)
    if meta[0] != "target_max_power_uw":
        raise ValueError("not a calibration table file")
    target = float(meta[1])
    lsb = float(meta[3])
    if not math.isclose(lsb, target / N_ROWS, rel_tol=1e-12):
        raise ValueError("lsb in header does not equal target_max_power / 1024")
    dead = tuple(int(x) for x in meta[5].split()) if len(meta) > 5 else ()
    header = next(reader)
    rows = [[int(x) for x in row[1:]] for row in reader]
    if len(rows) != N_ROWS:
        raise ValueError(f"expected {N_ROWS} table rows, got {len(rows)}")
    entries = np.array(rows, dtype=int)
    if entries.shape[1] != len(header) - 1:
        raise ValueError("row width does not match header")
    return CalibrationTable(target, entries, dead)


def save_table(table, path):
    with open(path, "w") as fh:
        write_table(table, fh)


def load_table(path):
    with open(path) as fh:
        return read_table(fh)


def write_linearity(reports, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["phase", "channel", "index", "dnl_lsb", "inl_lsb"])
    for rep in reports:
        for k in range(rep.inl.size):
            dnl = repr(float(rep.dnl[k])) if k < rep.dnl.size else ""
            w.writerow([rep.phase, rep.channel, k, dnl, repr(float(rep.inl[k]))])
