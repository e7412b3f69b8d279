"""Desk-scale pipeline: keystep extraction, unified tokenization, and a
two-stage autoregressive planner/policy over a toy manipulation simulator."""

__version__ = "0.1.0"
