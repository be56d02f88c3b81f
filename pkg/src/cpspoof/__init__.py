"""Carrier-phase DGNSS/IMU spoofing detection with a windowed fixed-ambiguity residual cost."""

__version__ = "0.1.0"
