"""Pooled TF overexpression screen analysis: QC, demultiplexing, differential
expression against an external control with background subtraction,
enrichment and validation against published rankings."""

__version__ = "0.1.0"
