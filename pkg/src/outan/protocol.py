"""16-bit random-access command frames and their serial bit streams.

Frame layout, most significant bit first on the wire::

    bit  15..11   10 .......... 1   0
         address  DAC code (MSB)    don't care

Streams are modelled in clock-cycle units. Data bit ``k`` is sampled on the
clock edge at ``k + 0.5``; chip-enable (CE) edges may sit anywhere on the
same axis. A sampled bit only enters the shift register while CE is low, and
the register is latched to the DAC on a CE rise.
"""
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .exceptions import FramingError, InvalidCommandError

N_CHANNELS = 32
N_CODES = 1024
FRAME_BITS = 16

ADDRESS_SHIFT = 11
VALUE_SHIFT = 1
ADDRESS_MASK = 0x1F
VALUE_MASK = 0x3FF

MODIFIED = "modified"
STANDARD = "standard"
MODES = (MODIFIED, STANDARD)

# Modified-mode CE pulse is narrower than one clock period so that it never
# overlaps a sampling edge.
_CE_PULSE = 0.25


class Command(NamedTuple):
    address: int
    value: int


def validate_command(cmd):
    address, value = int(cmd[0]), int(cmd[1])
    if not 0 <= address < N_CHANNELS:
        raise InvalidCommandError(f"address {address} outside 0..{N_CHANNELS - 1}")
    if not 0 <= value < N_CODES:
        raise InvalidCommandError(f"value {value} outside 0..{N_CODES - 1}")
    return Command(address, value)


def encode_command(cmd):
    """Pack a ``(address, value)`` command into a 16-bit frame word."""
    address, value = validate_command(cmd)
    return (address << ADDRESS_SHIFT) | (value << VALUE_SHIFT)


def decode_frame(frame):
    """Unpack a 16-bit frame word; the don't-care bit is ignored."""
    frame = int(frame)
    if not 0 <= frame <= 0xFFFF:
        raise InvalidCommandError(f"frame {frame:#x} is wider than 16 bits")
    return Command((frame >> ADDRESS_SHIFT) & ADDRESS_MASK, (frame >> VALUE_SHIFT) & VALUE_MASK)


def frame_bits(frame):
    return [(int(frame) >> (FRAME_BITS - 1 - k)) & 1 for k in range(FRAME_BITS)]


def cycles_per_frame(mode):
    if mode == MODIFIED:
        return FRAME_BITS
    if mode == STANDARD:
        return FRAME_BITS + 1
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class BitStream:
    """Data-line levels per clock cycle plus CE edges.

    ``ce_edges`` is a tuple of ``(time, level)`` pairs in cycle units, where
    ``level`` is 1 for a rise and 0 for a fall.
    """

    bits: tuple
    ce_edges: tuple
    mode: str

    @property
    def n_cycles(self):
        return len(self.bits)

    def truncate(self, n_cycles):
        """The stream as it would look if the line were cut after ``n_cycles``."""
        return BitStream(
            self.bits[:n_cycles],
            tuple(e for e in self.ce_edges if e[0] < n_cycles),
            self.mode,
        )


def serialize(cmds: Sequence, mode=MODIFIED):
    if len(cmds) == 0:
        raise InvalidCommandError("cannot serialize an empty command sequence")
    period = cycles_per_frame(mode)
    bits = []
    edges = []
    for i, cmd in enumerate(cmds):
        bits.extend(frame_bits(encode_command(cmd)))
        end = (i + 1) * period
        if mode == MODIFIED:
            edges.append((float(end), 1))
            edges.append((end + _CE_PULSE, 0))
        else:
            # CE stays high for the whole wasted cycle.
            bits.append(0)
            edges.append((float(end - 1), 1))
            edges.append((float(end), 0))
    return BitStream(tuple(bits), tuple(edges), mode)


def deserialize(stream: BitStream):
    """Recover the latched command sequence from a bit stream.

    Raises :class:`FramingError` when CE rises, or the stream ends, with a
    partially shifted frame. Commands latched before the bad frame are kept
    on the exception.
    """
    events = [(k + 0.5, 1, k) for k in range(len(stream.bits))]
    # Edges sort before a sampling edge at the same instant.
    events.extend((t, 0, level) for t, level in stream.ce_edges)
    events.sort(key=lambda e: (e[0], e[1]))

    ce_high = False
    register = []
    out = []
    for _, kind, payload in events:
        if kind == 1:
            if not ce_high:
                register.append(stream.bits[payload])
            continue
        if payload == 1 and not ce_high:
            if len(register) < FRAME_BITS:
                raise FramingError(
                    f"frame {len(out)}: CE rose after {len(register)} of {FRAME_BITS} bits",
                    len(out),
                    out,
                )
            word = 0
            for b in register[-FRAME_BITS:]:
                word = (word << 1) | (b & 1)
            out.append(decode_frame(word))
            register = []
        ce_high = payload == 1
    if register:
        raise FramingError(
            f"frame {len(out)}: stream ended after {len(register)} of {FRAME_BITS} bits",
            len(out),
            out,
        )
    return out


def command_period_us(commands_per_second=160_000):
    return 1e6 / commands_per_second


def clock_hz(commands_per_second=160_000, mode=MODIFIED):
    """Serial clock needed to sustain a command rate in the given mode."""
    return commands_per_second * cycles_per_frame(mode)


def format_hex(frames):
    return "".join(f"{int(f):04X}\n" for f in frames)


def parse_hex(text):
    """Parse the one-word-per-line hex dump; blank lines and ``#`` comments are skipped."""
    frames = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if len(line) != 4:
            raise InvalidCommandError(f"line {lineno}: expected 4 hex digits, got {raw!r}")
        try:
            frames.append(int(line, 16))
        except ValueError:
            raise InvalidCommandError(f"line {lineno}: not hexadecimal: {raw!r}") from None
    return frames
