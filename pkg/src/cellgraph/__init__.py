"""Cell-graph construction and a patched GraphSAGE/DiffPool grade classifier, in numpy."""

__version__ = "0.1.0"
