"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data or validation error, 3 simulated
hardware fault.
"""
import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import asic as asic_mod
from .calibration import build_table, linearity_reports, load_table, measure_ip_curves, save_table, write_linearity
from .exceptions import OutanError, PowerStateError
from .experiment import (generate_spikes, load_neurons, make_neurons, read_spikes, save_neurons, score_sequence,
                         write_spikes)
from .probe import load_probe, make_probe, save_probe, write_ip_curves
from .protocol import decode_frame, encode_command, format_hex, parse_hex
from .sequencer import (Sinusoid, StimEvent, StimScript, compile_script, load_script, make_sequence_script,
                        read_stream, read_trace, save_script, simulate, steps_per_cycle, write_stream, write_trace)

log = logging.getLogger("outan")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FAULT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _open_out(path):
    if path is None or str(path) == "-":
        return nullcontext(sys.stdout)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


def _read_text(path):
    if path is None or str(path) == "-":
        return sys.stdin.read()
    return Path(path).read_text()


def _probe(args):
    return load_probe(args.probe) if args.probe else make_probe(args.seed)


def read_commands(text):
    cmds = []
    lines = text.splitlines()
    if not lines:
        return cmds
    if lines[0].strip().replace(" ", "") != "address,value":
        raise ValueError("line 1: expected header 'address,value'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            a, v = (int(x) for x in line.split(","))
        except ValueError:
            raise ValueError(f"line {lineno}: malformed command {line!r}") from None
        cmds.append((a, v))
    return cmds


def format_commands(cmds):
    return "address,value\n" + "".join(f"{a},{v}\n" for a, v in cmds)


def cmd_encode(args):
    cmds = read_commands(_read_text(args.input))
    frames = []
    for k, c in enumerate(cmds, start=2):
        try:
            frames.append(encode_command(c))
        except OutanError as exc:
            raise ValueError(f"line {k}: {exc}") from None
    with _open_out(args.out) as fh:
        fh.write(format_hex(frames))


def cmd_decode(args):
    frames = parse_hex(_read_text(args.input))
    with _open_out(args.out) as fh:
        fh.write(format_commands(decode_frame(f) for f in frames))


def cmd_probe(args):
    probe = make_probe(args.seed, shanks=args.shanks, leds_per_shank=args.leds_per_shank)
    save_probe(probe, args.out or "probe.json")


def _calibrate(probe, reps, seed):
    state = asic_mod.powered_up()
    curves = measure_ip_curves(state, probe, reps=reps, seed=seed)
    return curves, build_table(curves)


def cmd_calibrate(args):
    out = Path(args.out or "table.csv")
    curves, table = _calibrate(_probe(args), args.reps, args.seed)
    save_table(table, out)
    with _open_out(out.with_name(out.stem + "_linearity.csv")) as fh:
        write_linearity(linearity_reports(table, curves), fh)
    with _open_out(out.with_name(out.stem + "_ipcurves.csv")) as fh:
        write_ip_curves(curves, fh)
    log.info("target %.3f uW, lsb %.3f nW, dead channels %s", table.target_max_power, table.lsb * 1e3,
             list(table.dead))


def cmd_script(args):
    probe = _probe(args)
    if args.kind == "sequence":
        leds = args.leds.split(",") if args.leds else probe.led_ids()[:9]
        channels = [probe.channel_of(led) for led in leds]
        script, _ = make_sequence_script(channels, args.per_led_ms, args.trials, args.inter_trial_ms, args.seed,
                                         args.peak_power, jitter_ms=args.jitter_ms)
    else:
        channels = range(args.channels)
        duration = args.cycles * 1e6 / args.freq
        script = StimScript([StimEvent(ch, Sinusoid(args.freq, args.peak_power), 0.0, duration)
                             for ch in channels])
    save_script(script, args.out or "script.json")


def cmd_compile(args):
    stream = compile_script(load_script(args.script), load_table(args.table))
    with _open_out(args.out or "stream.csv") as fh:
        write_stream(stream, fh)


def _initial_state(args):
    return asic_mod.load_snapshot(args.snapshot) if getattr(args, "snapshot", None) else asic_mod.powered_up()


def cmd_simulate(args):
    with open(args.stream) as fh:
        stream = read_stream(fh)
    trace = simulate(stream, _initial_state(args), _probe(args))
    with _open_out(args.out or "trace.csv") as fh:
        write_trace(trace, fh)


def cmd_asic_step(args):
    state = _initial_state(args)
    state = asic_mod.apply_frames(state, parse_hex(_read_text(args.frames)))
    probe = _probe(args)
    asic_mod.save_snapshot(state, args.out or "snapshot.json", probe)


def _neurons(args, script, probe):
    if args.neurons:
        return load_neurons(args.neurons)
    leds = [probe.channel_map[ch] for ch in script.sequence.channels]
    return make_neurons(leds)


def _require_sequence(script):
    if script.sequence is None:
        raise ValueError("script has no sequence/trial metadata")
    return script.sequence


def cmd_experiment_run(args):
    script = load_script(args.script)
    meta = _require_sequence(script)
    probe = _probe(args)
    with open(args.trace) as fh:
        trace = read_trace(fh)
    trains = generate_spikes(_neurons(args, script, probe), trace, probe, meta.trial_starts_ms, meta.window_ms,
                             args.seed)
    with _open_out(args.out or "spikes.csv") as fh:
        write_spikes(trains, fh)


def cmd_experiment_score(args):
    script = load_script(args.script)
    meta = _require_sequence(script)
    probe = _probe(args)
    neurons = _neurons(args, script, probe)
    with open(args.spikes) as fh:
        trains = read_spikes(fh, len(meta.trial_starts_ms), [n.id for n in neurons])
    result = score_sequence(trains, meta, neurons, probe, load_table(args.table))
    with _open_out(args.out or "result.json") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sinusoid_step_counts(script, stream):
    """Distinct ZOH step counts per cycle for each channel driven by a multi-cycle sinusoid."""
    out = {}
    for e in script.events:
        w = e.waveform
        if not isinstance(w, Sinusoid):
            continue
        period = 1e6 / w.freq_hz
        # Skip the first and last cycle, where the active set may be changing.
        t0 = e.start_us + period
        t1 = e.start_us + e.duration_us - period
        if t1 - t0 < period:
            continue
        counts = steps_per_cycle(stream, e.channel, w.freq_hz, t0, t1)
        if counts:
            out[str(e.channel)] = sorted(set(counts))
    return out


def cmd_pipeline(args):
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    script = load_script(args.script)
    probe = _probe(args)
    if args.table:
        table = load_table(args.table)
    else:
        curves, table = _calibrate(probe, args.reps, args.seed)
        save_table(table, out / "table.csv")

    stages = {}
    try:
        stream = compile_script(script, table)
    except Exception as exc:
        raise StageError("compile", exc) from exc
    with open(out / "stream.csv", "w") as fh:
        write_stream(stream, fh)
    try:
        trace = simulate(stream, _initial_state(args), probe)
    except Exception as exc:
        raise StageError("simulate", exc) from exc
    with open(out / "trace.csv", "w", newline="") as fh:
        write_trace(trace, fh)
    stages["frames"] = len(stream)
    stages["trace_rows"] = len(trace)
    stages["steps_per_cycle"] = sinusoid_step_counts(script, stream)

    if script.sequence is not None:
        meta = script.sequence
        neurons = _neurons(args, script, probe)
        save_neurons(neurons, out / "neurons.json")
        try:
            trains = generate_spikes(neurons, trace, probe, meta.trial_starts_ms, meta.window_ms, args.seed)
        except Exception as exc:
            raise StageError("generate", exc) from exc
        with open(out / "spikes.csv", "w", newline="") as fh:
            write_spikes(trains, fh)
        try:
            stages["sequence"] = score_sequence(trains, meta, neurons, probe, table).to_dict()
        except Exception as exc:
            raise StageError("score", exc) from exc
    with open(out / "stats.json", "w") as fh:
        json.dump(stages, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed for every random stream")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("--probe", default=argparse.SUPPRESS, help="probe description (JSON)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="outan", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--probe", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("encode", parents=[common], help="command CSV -> hex frames")
    s.add_argument("input", nargs="?", default="-")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", parents=[common], help="hex frames -> command CSV")
    s.add_argument("input", nargs="?", default="-")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("probe", parents=[common], help="write a synthetic probe description")
    s.add_argument("--shanks", type=int, default=4)
    s.add_argument("--leds-per-shank", type=int, default=3)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("calibrate", parents=[common], help="measure I-P curves and build a calibration table")
    s.add_argument("--reps", type=int, default=9)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("script", parents=[common], help="write a stimulation script")
    s.add_argument("kind", choices=("sequence", "sinusoid"))
    s.add_argument("--leds", help="comma-separated μLED ids in activation order")
    s.add_argument("--per-led-ms", type=float, default=15.0)
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--inter-trial-ms", type=float, default=200.0)
    s.add_argument("--jitter-ms", type=float, default=0.0)
    s.add_argument("--peak-power", type=float, default=0.45, help="μW")
    s.add_argument("--channels", type=int, default=12)
    s.add_argument("--freq", type=float, default=1000.0)
    s.add_argument("--cycles", type=int, default=10)
    s.set_defaults(func=cmd_script)

    s = sub.add_parser("compile", parents=[common], help="script -> command stream")
    s.add_argument("--script", required=True)
    s.add_argument("--table", required=True)
    s.set_defaults(func=cmd_compile)

    s = sub.add_parser("simulate", parents=[common], help="command stream -> output trace")
    s.add_argument("--stream", required=True)
    s.add_argument("--snapshot")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("asic", help="ASIC state operations")
    asub = s.add_subparsers(dest="asic_command", required=True, parser_class=_Parser)
    a = asub.add_parser("step", parents=[common], help="apply a hex frame file to a snapshot")
    a.add_argument("--frames", required=True)
    a.add_argument("--snapshot")
    a.set_defaults(func=cmd_asic_step)

    s = sub.add_parser("experiment", help="synthetic neurons and sequence scoring")
    esub = s.add_subparsers(dest="experiment_command", required=True, parser_class=_Parser)
    e = esub.add_parser("run", parents=[common], help="trace -> spike trains")
    e.add_argument("--trace", required=True)
    e.add_argument("--script", required=True)
    e.add_argument("--neurons")
    e.set_defaults(func=cmd_experiment_run)
    e = esub.add_parser("score", parents=[common], help="spike trains -> sequence statistics")
    e.add_argument("--spikes", required=True)
    e.add_argument("--script", required=True)
    e.add_argument("--table", required=True)
    e.add_argument("--neurons")
    e.set_defaults(func=cmd_experiment_score)

    s = sub.add_parser("pipeline", parents=[common], help="compile, simulate, generate and score")
    s.add_argument("--script", required=True)
    s.add_argument("--table")
    s.add_argument("--neurons")
    s.add_argument("--snapshot")
    s.add_argument("--reps", type=int, default=9)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"outan: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return EXIT_FAULT if isinstance(exc.cause, PowerStateError) else EXIT_DATA
    except PowerStateError as exc:
        print(f"outan: hardware fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (OutanError, ValueError, KeyError, OSError) as exc:
        print(f"outan: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
