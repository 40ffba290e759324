"""LSTM spectrum prediction with windowed-MMSE interference detection."""

__version__ = "0.1.0"
