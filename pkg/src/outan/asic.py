"""Behavioral model of the 32-channel current-source ASIC.

:class:`AsicState` is an immutable value. Every operation takes a state and
returns a new one (or a derived quantity), so a simulation is a fold of
frames and power events over an initial state.
"""
import json
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .exceptions import LoadError, PowerStateError
from .probe import OK, OPEN, SHORT, led_current, led_power, led_voltage
from .protocol import N_CHANNELS, N_CODES, decode_frame

ANALOG = "analog_1v2"
DIGITAL = "digital_1v2"
NEGATIVE = "negative_1v2"
HIGH = "high_5v"
RAILS = (ANALOG, DIGITAL, NEGATIVE, HIGH)

OFF = "off"
ANALOG_ON = "analog_on"
DIGITAL_ON = "digital_on"
FULLY_ON = "fully_on"
FAULTED = "faulted"

# Output-stage constants of the R-2R + OTA + 1:64 mirror chain.
DAC_FULL_SCALE_V = 0.38
BIAS_CURRENT = 1e-6
MIRROR_RATIO = 64

IDLE_POWER_MW = 84.0
STIM_POWER_MW_PER_MA = 6.95
ASIC_IDLE_POWER_MW = 16.0  # ASIC alone, from simulation; not used in accounting

DEFAULT_CROSSTALK_GAIN = 1 / 417
# Per-observation CV giving ~90% of 9-rep sample CVs below 0.1%.
DEFAULT_NOISE_CV = 0.00077


class ClampRegion(NamedTuple):
    code_low: int
    code_high: int
    v_out_min: float
    v_out_max: float


DEFAULT_CLAMP_REGIONS = (
    ClampRegion(1, 341, 0.0, 2.5),
    ClampRegion(342, 682, 1.5, 3.75),
    ClampRegion(683, 1023, 2.5, 5.0),
)


class PowerEvent(NamedTuple):
    rail: str
    direction: str  # "on" | "off"
    time: float = 0.0  # μs


class ChannelOutput(NamedTuple):
    actual_current: float
    output_voltage: float
    in_region: bool


class ChannelState(NamedTuple):
    latched_code: int
    commanded_current: float
    actual_current: float
    output_voltage: float
    in_region: bool


def _check_regions(regions):
    expected = 1
    for r in sorted(regions):
        if r.code_low != expected or r.code_high < r.code_low or r.v_out_min > r.v_out_max:
            raise ValueError("clamp regions must partition codes 1..1023 without gaps or overlaps")
        expected = r.code_high + 1
    if expected != N_CODES:
        raise ValueError("clamp regions must partition codes 1..1023 without gaps or overlaps")


@dataclass(frozen=True)
class AsicState:
    codes: tuple = (0,) * N_CHANNELS
    rails: frozenset = frozenset()
    faulted: bool = False
    v_compliance: float = 4.6
    full_scale: float = 1e-3
    clamp_regions: tuple = DEFAULT_CLAMP_REGIONS
    crosstalk_gain: float = DEFAULT_CROSSTALK_GAIN
    noise_cv: float = DEFAULT_NOISE_CV
    gains: tuple = (1.0,) * N_CHANNELS
    hold_window_us: float = 10_000.0

    def __post_init__(self):
        if len(self.codes) != N_CHANNELS or len(self.gains) != N_CHANNELS:
            raise ValueError("codes and gains must have one entry per channel")
        object.__setattr__(self, "clamp_regions", tuple(ClampRegion(*r) for r in self.clamp_regions))
        _check_regions(self.clamp_regions)

    @property
    def power(self):
        if self.faulted:
            return FAULTED
        if self.rails == frozenset(RAILS):
            return FULLY_ON
        if ANALOG in self.rails and DIGITAL in self.rails:
            return DIGITAL_ON
        if ANALOG in self.rails:
            return ANALOG_ON
        return OFF


def powered_up(**kwargs):
    """A fresh state taken through the legal power-on sequence."""
    state = AsicState(**kwargs)
    return power_transition(state, POWER_ON_SEQUENCE)


POWER_ON_SEQUENCE = (
    PowerEvent(ANALOG, "on", 0.0),
    PowerEvent(DIGITAL, "on", 1_000.0),
    PowerEvent(NEGATIVE, "on", 2_000.0),
    PowerEvent(HIGH, "on", 2_000.0),
)

POWER_OFF_SEQUENCE = (
    PowerEvent(HIGH, "off", 0.0),
    PowerEvent(NEGATIVE, "off", 0.0),
    PowerEvent(DIGITAL, "off", 1_000.0),
    PowerEvent(ANALOG, "off", 2_000.0),
)


def _require_on(state):
    if state.power != FULLY_ON:
        raise PowerStateError(f"ASIC is {state.power}, not fully_on")


def feedback_resistance(full_scale=1e-3):
    """Feedback resistor that maps the DAC full-scale voltage to ``full_scale`` output."""
    return MIRROR_RATIO * DAC_FULL_SCALE_V / full_scale


def mirror_currents(code, full_scale=1e-3):
    """Internal currents for a code: ``(v_in, i_m1, i_out)``.

    ``i_m1`` includes the bias current added on the mirror input; ``i_out``
    has the multiplied bias subtracted again.
    """
    v_in = DAC_FULL_SCALE_V * code / N_CODES
    i_m1 = v_in / feedback_resistance(full_scale) + BIAS_CURRENT
    i_out = MIRROR_RATIO * i_m1 - MIRROR_RATIO * BIAS_CURRENT
    return v_in, i_m1, i_out


def ideal_current(state, code):
    """Output current (A) for a DAC code on an ideal channel."""
    _require_on(state)
    if not 0 <= code < N_CODES:
        raise ValueError(f"code {code} outside 0..{N_CODES - 1}")
    current = code / N_CODES * state.full_scale
    _, _, mirrored = mirror_currents(code, state.full_scale)
    assert math.isclose(mirrored, current, rel_tol=1e-9, abs_tol=1e-15)
    return current


def commanded_current(state, channel):
    return ideal_current(state, state.codes[channel]) * state.gains[channel]


def apply_frame(state, frame):
    """Latch one frame: only the addressed channel's register changes."""
    _require_on(state)
    address, value = decode_frame(frame)
    codes = list(state.codes)
    codes[address] = value
    return replace(state, codes=tuple(codes))


def apply_frames(state, frames):
    for f in frames:
        state = apply_frame(state, f)
    return state


def region_of(state, code):
    if code == 0:
        return state.clamp_regions[0]
    for r in state.clamp_regions:
        if r.code_low <= code <= r.code_high:
            return r
    raise ValueError(f"code {code} outside 0..{N_CODES - 1}")


def region_check(state, code, v_out):
    """Whether ``v_out`` lies in the clamp window selected by ``code``.

    Code 0 shares the lowest window.
    """
    _require_on(state)
    r = region_of(state, code)
    return r.v_out_min <= v_out <= r.v_out_max


def resolve_current(state, current, load):
    """Compliance-limited ``(actual current, output voltage)`` for a commanded current."""
    if load is None or load.state == OPEN:
        # No path for current; an idle source does not rail.
        return 0.0, (state.v_compliance if current > 0 else 0.0)
    if load.state == SHORT:
        return current, 0.0
    v = led_voltage(load, current)
    if v <= state.v_compliance:
        return current, v
    return led_current(load, state.v_compliance), state.v_compliance


def resolve_output(state, channel, load):
    _require_on(state)
    code = state.codes[channel]
    actual, v_out = resolve_current(state, commanded_current(state, channel), load)
    in_region = region_check(state, code, v_out)
    if (load is None or load.state == OPEN) and code > 0:
        in_region = False
    return ChannelOutput(actual, v_out, in_region)


def channel_state(state, channel, load):
    out = resolve_output(state, channel, load)
    return ChannelState(state.codes[channel], commanded_current(state, channel), *out)


def saturation_onset_code(state, channel, load):
    """Code nearest the compliance knee, where ``led_voltage(I(code)) = v_compliance``.

    Returns ``None`` when the channel never saturates.
    """
    _require_on(state)
    if load is None or load.state != OK:
        raise LoadError("saturation onset is only defined for a working μLED")
    i_max = led_current(load, state.v_compliance)
    step = state.full_scale * state.gains[channel] / N_CODES
    code = round(i_max / step)
    return code if code < N_CODES else None


def code_response(state, channel, load):
    """Noise-free ``(current, power, voltage)`` arrays over every code for one channel."""
    _require_on(state)
    current = np.empty(N_CODES)
    power = np.empty(N_CODES)
    voltage = np.empty(N_CODES)
    step = state.full_scale * state.gains[channel] / N_CODES
    for code in range(N_CODES):
        i, v = resolve_current(state, code * step, load)
        current[code] = i
        voltage[code] = v
        power[code] = 0.0 if load is None else led_power(load, i)
    return current, power, voltage


def inject_crosstalk(state, victim_channel, probe):
    """Current (A) coupled into a victim from its probe-adjacent channels."""
    _require_on(state)
    total = 0.0
    for ch in probe.neighbours(victim_channel):
        total += resolve_output(state, ch, probe.load(ch)).actual_current
    return state.crosstalk_gain * total


def _apply_power_event(state, event):
    if event.rail not in RAILS or event.direction not in ("on", "off"):
        raise ValueError(f"bad power event {event!r}")
    rails = set(state.rails)
    if event.direction == "on":
        rails.add(event.rail)
    else:
        rails.discard(event.rail)
    rails = frozenset(rails)
    # The output stage is damaged whenever a high-side rail is live while
    # either 1.2 V rail is down.
    unsafe = bool(rails & {HIGH, NEGATIVE}) and not {ANALOG, DIGITAL} <= rails
    codes = state.codes if rails == frozenset(RAILS) else (0,) * N_CHANNELS
    return replace(state, rails=rails, faulted=state.faulted or unsafe, codes=codes)


def power_transition(state, events):
    """Apply power events in time order. A fault is permanent."""
    events = sorted((PowerEvent(*e) for e in events), key=lambda e: e.time)
    for e in events:
        state = _apply_power_event(state, e)
    return state


def sudden_disconnect(state, sequence=POWER_OFF_SEQUENCE):
    """Input supply lost: run ``sequence`` off the hold capacitor.

    If the sequence outlasts ``hold_window_us`` the remaining rails collapse
    together, which faults the chip.
    """
    if state.faulted:
        return state
    sequence = sorted((PowerEvent(*e) for e in sequence), key=lambda e: e.time)
    if sequence and sequence[-1].time - sequence[0].time > state.hold_window_us:
        return replace(state, rails=frozenset(), faulted=True, codes=(0,) * N_CHANNELS)
    return power_transition(state, sequence)


def power_consumption(state, probe=None):
    """System power draw in mW: idle plus a per-mA stimulation cost."""
    if state.power != FULLY_ON:
        return 0.0
    total = 0.0
    for ch in range(N_CHANNELS):
        if probe is None:
            total += commanded_current(state, ch)
        else:
            total += resolve_output(state, ch, probe.load(ch)).actual_current
    return IDLE_POWER_MW + STIM_POWER_MW_PER_MA * total * 1e3


def observe(values, noise_cv, reps, rng):
    """Repeated measurements with multiplicative Gaussian noise.

    ``values`` has any shape; the result gains a trailing axis of length ``reps``.
    """
    values = np.asarray(values, dtype=float)
    if noise_cv == 0:
        return np.repeat(values[..., None], reps, axis=-1)
    noise = rng.standard_normal(values.shape + (reps,))
    return values[..., None] * (1.0 + noise_cv * noise)


def snapshot(state, probe=None):
    d = {
        "power": state.power,
        "rails": sorted(state.rails),
        "faulted": state.faulted,
        "codes": list(state.codes),
        "v_compliance": state.v_compliance,
        "full_scale": state.full_scale,
        "crosstalk_gain": state.crosstalk_gain,
        "noise_cv": state.noise_cv,
        "gains": list(state.gains),
        "clamp_regions": [list(r) for r in state.clamp_regions],
        "hold_window_us": state.hold_window_us,
    }
    if probe is not None and state.power == FULLY_ON:
        d["outputs"] = [channel_state(state, ch, probe.load(ch))._asdict() for ch in range(N_CHANNELS)]
    return d


def from_snapshot(d):
    return AsicState(
        codes=tuple(int(c) for c in d["codes"]),
        rails=frozenset(d["rails"]),
        faulted=bool(d["faulted"]),
        v_compliance=float(d["v_compliance"]),
        full_scale=float(d["full_scale"]),
        clamp_regions=tuple(ClampRegion(*r) for r in d["clamp_regions"]),
        crosstalk_gain=float(d["crosstalk_gain"]),
        noise_cv=float(d["noise_cv"]),
        gains=tuple(float(g) for g in d["gains"]),
        hold_window_us=float(d.get("hold_window_us", 10_000.0)),
    )


def save_snapshot(state, path, probe=None):
    with open(path, "w") as fh:
        json.dump(snapshot(state, probe), fh, indent=2)
        fh.write("\n")


def load_snapshot(path):
    with open(path) as fh:
        return from_snapshot(json.load(fh))
