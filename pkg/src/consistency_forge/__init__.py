"""Physics-consistency training for joint molecular energy and
equilibrium-structure prediction on synthetic two-fidelity corpora."""

__version__ = "0.1.0"
