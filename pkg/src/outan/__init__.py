"""Host-side controller library and behavioral emulator for a 32-channel μLED current source."""

__version__ = "0.1.0"
