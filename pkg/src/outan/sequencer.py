"""Stimulation scripts, round-robin command scheduling and ZOH output traces.

Time is in μs throughout except for waveform shape parameters, which are in
ms or Hz as they are usually quoted.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import substream
from .asic import FULLY_ON, code_response
from .exceptions import BandwidthError, OutOfRangeError, PowerStateError, ScriptError
from .protocol import ADDRESS_SHIFT, N_CHANNELS, VALUE_SHIFT, decode_frame

SLOT_PERIOD_US = 6.25
MAX_REFRESH_US = 200.0


@dataclass(frozen=True)
class Constant:
    power: float
    kind = "constant"

    @property
    def peak(self):
        return self.power

    def sample(self, t_us):
        return np.full(np.shape(t_us), float(self.power))


@dataclass(frozen=True)
class Sinusoid:
    """Raised cosine ``peak·(1 − cos 2πft)/2``: zero at phase 0, never negative."""

    freq_hz: float
    peak_power: float
    kind = "sinusoid"

    @property
    def peak(self):
        return self.peak_power

    def sample(self, t_us):
        t = np.asarray(t_us, dtype=float) * 1e-6
        return self.peak_power * (1.0 - np.cos(2 * np.pi * self.freq_hz * t)) / 2.0


@dataclass(frozen=True)
class FlankedPulse:
    """Plateau pulse with half-cosine rise and fall edges."""

    plateau_power: float
    plateau_ms: float
    edge_half_sine_ms: float
    kind = "flanked_pulse"

    @property
    def peak(self):
        return self.plateau_power

    @property
    def duration_us(self):
        return (self.plateau_ms + 2 * self.edge_half_sine_ms) * 1e3

    def sample(self, t_us):
        t = np.asarray(t_us, dtype=float)
        edge = self.edge_half_sine_ms * 1e3
        end = self.duration_us
        out = np.full(t.shape, float(self.plateau_power))
        if edge > 0:
            rising = t < edge
            falling = t > end - edge
            out[rising] = self.plateau_power * (1 - np.cos(np.pi * t[rising] / edge)) / 2
            out[falling] = self.plateau_power * (1 - np.cos(np.pi * (end - t[falling]) / edge)) / 2
        out[(t < 0) | (t > end)] = 0.0
        return out


WAVEFORMS = {w.kind: w for w in (Constant, Sinusoid, FlankedPulse)}


def waveform_sample(waveform, t_us):
    """Commanded optical power (μW) at ``t_us`` after the event start."""
    out = waveform.sample(np.asarray(t_us, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def waveform_to_dict(w):
    return {"kind": w.kind, **asdict(w)}


def waveform_from_dict(d):
    d = dict(d)
    cls = WAVEFORMS[d.pop("kind")]
    return cls(**d)


@dataclass(frozen=True)
class StimEvent:
    channel: int
    waveform: object
    start_us: float
    duration_us: float


@dataclass(frozen=True)
class SequenceMeta:
    """Trial layout of a multi-μLED sequence script."""

    channels: tuple
    per_led_ms: float
    trial_starts_ms: tuple
    pattern_ms: float
    window_ms: float
    peak_power: float


@dataclass
class StimScript:
    events: list = field(default_factory=list)
    sequence: SequenceMeta = None

    def validate(self, table=None):
        by_channel = {}
        for e in self.events:
            if not 0 <= e.channel < N_CHANNELS:
                raise ScriptError(f"channel {e.channel} outside 0..{N_CHANNELS - 1}")
            if not e.duration_us > 0:
                raise ScriptError(f"event on channel {e.channel} has non-positive duration")
            if e.start_us < 0:
                raise ScriptError("event start times must be non-negative")
            if table is not None and e.waveform.peak > table.target_max_power * (1 + 1e-12):
                raise OutOfRangeError(
                    f"channel {e.channel}: {e.waveform.peak} μW exceeds calibrated "
                    f"maximum {table.target_max_power} μW"
                )
            by_channel.setdefault(e.channel, []).append(e)
        for ch, evs in by_channel.items():
            evs.sort(key=lambda e: e.start_us)
            for a, b in zip(evs, evs[1:]):
                if b.start_us < a.start_us + a.duration_us:
                    raise ScriptError(f"overlapping events on channel {ch}")

    def to_dict(self):
        d = {
            "events": [
                {"channel": e.channel, "start_us": e.start_us, "duration_us": e.duration_us,
                 "waveform": waveform_to_dict(e.waveform)}
                for e in self.events
            ],
        }
        if self.sequence is not None:
            d["sequence"] = asdict(self.sequence)
        return d

    @classmethod
    def from_dict(cls, d):
        events = [
            StimEvent(int(e["channel"]), waveform_from_dict(e["waveform"]),
                      float(e["start_us"]), float(e["duration_us"]))
            for e in d.get("events", [])
        ]
        seq = d.get("sequence")
        if seq is not None:
            seq = SequenceMeta(**{**seq, "channels": tuple(seq["channels"]),
                                  "trial_starts_ms": tuple(seq["trial_starts_ms"])})
        return cls(events, seq)


def load_script(path):
    with open(path) as fh:
        return StimScript.from_dict(json.load(fh))


def save_script(script, path):
    with open(path, "w") as fh:
        json.dump(script.to_dict(), fh, indent=1)
        fh.write("\n")


@dataclass
class CommandStream:
    slot_period: float
    slots: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.uint16)
        if self.slots.size > 1 and np.any(np.diff(self.slots) <= 0):
            raise ValueError("slot indices must be strictly increasing")

    def __len__(self):
        return int(self.slots.size)

    @property
    def channels(self):
        return (self.frames >> ADDRESS_SHIFT) & 0x1F

    @property
    def codes(self):
        return (self.frames >> VALUE_SHIFT) & 0x3FF

    @property
    def times_us(self):
        return self.slots * self.slot_period

    def commands(self):
        return [decode_frame(f) for f in self.frames]


def write_stream(stream, fh):
    fh.write(f"# slot_period_us={stream.slot_period!r}\n")
    fh.write("slot,frame_hex\n")
    fh.writelines(f"{s},{f:04X}\n" for s, f in zip(stream.slots.tolist(), stream.frames.tolist()))


def read_stream(fh):
    period = SLOT_PERIOD_US
    slots, frames = [], []
    header_seen = False
    for lineno, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "slot_period_us":
                period = float(value)
            continue
        if not header_seen:
            if line != "slot,frame_hex":
                raise ValueError(f"line {lineno}: expected header 'slot,frame_hex'")
            header_seen = True
            continue
        try:
            s, f = line.split(",")
            slots.append(int(s))
            frames.append(int(f, 16))
        except ValueError:
            raise ValueError(f"line {lineno}: malformed stream row {line!r}") from None
    return CommandStream(period, slots, frames)


def _slot(t_us, period):
    # First slot whose start time is at or after t_us.
    return math.ceil(t_us / period - 1e-9)


def _pack(channels, codes):
    return (np.asarray(channels, dtype=np.uint16) << ADDRESS_SHIFT) | (
        np.asarray(codes, dtype=np.uint16) << VALUE_SHIFT
    )


def compile_script(script, table, slot_period=SLOT_PERIOD_US, max_refresh_us=MAX_REFRESH_US):
    """Schedule a script as one frame per slot, round-robin over active channels.

    Within each interval where the active set is constant, channels are
    visited in ascending order. A channel leaving the set gets one explicit
    code-0 frame before the rotation over the remaining channels resumes.
    """
    script.validate(table)
    spans = []
    for e in script.events:
        a = _slot(e.start_us, slot_period)
        b = _slot(e.start_us + e.duration_us, slot_period)
        if b > a:
            spans.append((a, b, e))
    bounds = sorted({a for a, _, _ in spans} | {b for _, b, _ in spans})

    out_slots, out_frames = [], []
    cursor = 0
    previous = set()
    for k in range(len(bounds)):
        seg_start = bounds[k]
        seg_end = bounds[k + 1] if k + 1 < len(bounds) else seg_start
        active = {e.channel: e for a, b, e in spans if a <= seg_start < b}
        departed = sorted(previous - set(active))
        cursor = max(cursor, seg_start)
        if departed:
            out_slots.append(np.arange(cursor, cursor + len(departed)))
            out_frames.append(_pack(departed, np.zeros(len(departed))))
            cursor += len(departed)
        previous = set(active)
        if not active or cursor >= seg_end:
            continue
        order = np.array(sorted(active))
        n = order.size
        if n * slot_period > max_refresh_us * (1 + 1e-12):
            raise BandwidthError(
                f"{n} active channels need a {n * slot_period} μs refresh period, "
                f"above the {max_refresh_us} μs limit"
            )
        slots = np.arange(cursor, seg_end)
        chans = order[(slots - cursor) % n]
        power = np.empty(slots.size)
        for ch, e in active.items():
            m = chans == ch
            t = np.clip(slots[m] * slot_period - e.start_us, 0.0, e.duration_us)
            power[m] = e.waveform.sample(t)
        codes = table.lookup_many(chans, np.minimum(power, table.target_max_power))
        out_slots.append(slots)
        out_frames.append(_pack(chans, codes))
        cursor = seg_end
    if not out_slots:
        return CommandStream(slot_period, [], [])
    return CommandStream(slot_period, np.concatenate(out_slots), np.concatenate(out_frames))


def refresh_period_us(n_active, slot_period=SLOT_PERIOD_US):
    return n_active * slot_period


@dataclass
class Trace:
    """Per-channel change points of a ZOH output.

    Row ``k`` says that from ``time_us[k]`` on, ``channel[k]`` holds the
    given code, current, optical power and voltage, until that channel's
    next row. Before its first row a channel holds its initial state, which
    is recorded at time 0.
    """

    time_us: np.ndarray
    channel: np.ndarray
    code: np.ndarray
    current_a: np.ndarray
    power_uw: np.ndarray
    voltage_v: np.ndarray

    COLUMNS = ("time_us", "channel", "code", "current_a", "power_uw", "voltage_v")

    def __len__(self):
        return int(self.time_us.size)

    def for_channel(self, channel):
        m = self.channel == channel
        return {c: getattr(self, c)[m] for c in self.COLUMNS}

    def value_at(self, channel, t_us, column="power_uw"):
        rows = self.for_channel(channel)
        t = np.asarray(t_us, dtype=float)
        if rows["time_us"].size == 0:
            return np.zeros(t.shape)
        idx = np.searchsorted(rows["time_us"], t, side="right") - 1
        vals = rows[column]
        return np.where(idx >= 0, vals[np.clip(idx, 0, None)], 0.0)

    def sample(self, t_us, channels=None):
        """Dense ``(len(t_us), n_channels)`` optical power at the given times."""
        channels = range(N_CHANNELS) if channels is None else channels
        return np.column_stack([self.value_at(ch, t_us) for ch in channels])


def write_trace(trace, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(Trace.COLUMNS)
    for row in zip(trace.time_us.tolist(), trace.channel.tolist(), trace.code.tolist(),
                   trace.current_a.tolist(), trace.power_uw.tolist(), trace.voltage_v.tolist()):
        w.writerow([repr(row[0]), row[1], row[2], repr(row[3]), repr(row[4]), repr(row[5])])


def read_trace(fh):
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != Trace.COLUMNS:
        raise ValueError(f"expected trace header {','.join(Trace.COLUMNS)}")
    rows = list(reader)
    cols = list(zip(*rows)) if rows else [()] * 6
    return Trace(
        np.array(cols[0], dtype=float), np.array(cols[1], dtype=int), np.array(cols[2], dtype=int),
        np.array(cols[3], dtype=float), np.array(cols[4], dtype=float), np.array(cols[5], dtype=float),
    )


def simulate(stream, asic, probe):
    """Apply a stream slot by slot to the ASIC and resolve every channel against its load.

    Frames that re-latch a channel's current code leave the output unchanged
    and produce no trace row.
    """
    if asic.power != FULLY_ON:
        raise PowerStateError(f"cannot simulate: ASIC is {asic.power}")
    chans = stream.channels.astype(int)
    codes = stream.codes.astype(int)
    times = stream.times_us
    parts = []
    for ch in sorted(set(chans.tolist()) | {c for c in range(N_CHANNELS) if asic.codes[c]}):
        current, power, voltage = code_response(asic, ch, probe.load(ch))
        m = chans == ch
        c_codes = np.concatenate([[asic.codes[ch]], codes[m]])
        c_times = np.concatenate([[0.0], times[m]])
        keep = np.concatenate([[True], c_codes[1:] != c_codes[:-1]])
        c_codes, c_times = c_codes[keep], c_times[keep]
        parts.append((c_times, np.full(c_codes.size, ch), c_codes,
                      current[c_codes], power[c_codes], voltage[c_codes]))
    if not parts:
        empty = np.array([])
        return Trace(empty, empty.astype(int), empty.astype(int), empty, empty, empty)
    cols = [np.concatenate(p) for p in zip(*parts)]
    order = np.lexsort((cols[1], cols[0]))
    return Trace(*(c[order] for c in cols))


def _per_period(times, freq_hz, t_start_us, t_stop_us):
    period = 1e6 / freq_hz
    n = int((t_stop_us - t_start_us) // period)
    if n <= 0:
        return []
    edges = t_start_us + period * np.arange(n + 1)
    return np.diff(np.searchsorted(np.sort(times), edges, side="left")).tolist()


def steps_per_cycle(stream, channel, freq_hz, t_start_us, t_stop_us):
    """ZOH steps (latched updates) on a channel in each whole period of the window.

    An update that re-latches the same code still starts a new hold interval.
    """
    return _per_period(stream.times_us[stream.channels == channel], freq_hz, t_start_us, t_stop_us)


def changes_per_cycle(trace, channel, freq_hz, t_start_us, t_stop_us):
    """Visible output level changes on a channel in each whole period of the window.

    One fewer than :func:`steps_per_cycle` when two updates straddle a peak
    or trough symmetrically and land on the same code.
    """
    return _per_period(trace.for_channel(channel)["time_us"], freq_hz, t_start_us, t_stop_us)


def make_sequence_script(channels, per_led_ms=15.0, n_trials=500, inter_trial_ms=200.0, seed=0,
                         peak_power=0.45, tail_ms=50.0, jitter_ms=0.0):
    """One single-cycle raised-cosine pulse per channel, back to back, repeated per trial.

    The channel order is used as given. ``jitter_ms`` randomizes each
    inter-trial gap uniformly by ±jitter using the seed.
    """
    channels = tuple(int(c) for c in channels)
    if not channels:
        raise ScriptError("a sequence needs at least one μLED")
    if not 15.0 <= per_led_ms <= 20.0:
        raise ScriptError("per-μLED duration must be within 15..20 ms")
    rng = substream(seed, "script")
    pattern_ms = per_led_ms * len(channels)
    gaps = inter_trial_ms + rng.uniform(-jitter_ms, jitter_ms, n_trials) if jitter_ms else np.full(n_trials, inter_trial_ms)
    wave = Sinusoid(1e3 / per_led_ms, peak_power)
    events = []
    starts = []
    t = 0.0
    for k in range(n_trials):
        starts.append(t)
        for j, ch in enumerate(channels):
            events.append(StimEvent(ch, wave, (t + j * per_led_ms) * 1e3, per_led_ms * 1e3))
        t += pattern_ms + float(gaps[k])
    meta = SequenceMeta(channels, per_led_ms, tuple(starts), pattern_ms, pattern_ms + tail_ms, peak_power)
    return StimScript(events, meta), meta
