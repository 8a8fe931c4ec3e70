"""Label, verify, correct: few-shot pseudo-labelling pipeline tooling."""

__version__ = "0.1.0"
