"""NaiveTPU: instruction set, datapath simulator, CNN compiler and golden reference."""

__version__ = "0.1.0"
