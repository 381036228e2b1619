"""Time-division ISAC with multi-static near-field sensing and robust beamforming."""

__version__ = "0.1.0"
