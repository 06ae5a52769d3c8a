"""antopt: ant colony optimization with learned heuristic measures."""

__version__ = "0.1.0"
