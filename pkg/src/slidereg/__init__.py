"""Multi-stage rigid registration of serial-section whole-slide images."""

__version__ = "0.1.0"
