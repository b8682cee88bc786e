"""Unpaired image-to-report generation via cross-modal alignment, verified on
a synthetic corpus with an exact label-grammar oracle."""

__version__ = "0.1.0"
