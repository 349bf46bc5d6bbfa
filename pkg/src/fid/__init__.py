"""Physical-layer device identification from transmitter nonlinearity.

The package models the data-to-signal function of a transmitter, learns
per-device fingerprints of the nonlinear residual it leaves on the waveform,
and decides identity claims from over-the-air packets.
"""

__version__ = "0.1.0"
