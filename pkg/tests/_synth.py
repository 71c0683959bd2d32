"""Shared builders for test scenarios."""
from dataclasses import replace

from outan.asic import powered_up
from outan.calibration import build_table, measure_ip_curves
from outan.probe import led_current, led_power, make_probe

ASIC = powered_up()


def led_max(model, v=4.6):
    return led_power(model, led_current(model, v))


def probe_with_weakest(weakest_uw, seed=0, margin=0.2):
    """Default probe rescaled so its weakest μLED peaks at ``weakest_uw + margin``."""
    probe = make_probe(seed)
    maxima = {k: led_max(m) for k, m in probe.leds.items()}
    scale = (weakest_uw + margin) / min(maxima.values())
    for k, m in probe.leds.items():
        probe = probe.with_led(k, replace(m, eta=m.eta * scale))
    return probe


def calibrated(probe=None, seed=0):
    probe = probe or make_probe(seed)
    curves = measure_ip_curves(ASIC, probe, seed=seed)
    return probe, curves, build_table(curves)
