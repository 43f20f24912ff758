"""Hybrid-dynamics identification, behavioral cloning and hybrid REPS."""
__version__ = "0.1.0"
