"""Joint distributed sensor registration and multitarget tracking."""

__version__ = "0.1.0"
