"""Weight generation from offline optimizer trajectories with hybrid sub-trajectory balance."""

__version__ = "0.1.0"
