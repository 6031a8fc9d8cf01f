"""Minimum-wage exposure measurement from grouped wage tables.

Modules: ``ingest`` (loading and validation), ``dist`` (grouped-data
statistics), ``tilt`` (exponential-tilting imputation), ``bite`` (treatment
intensity), ``fe`` (fixed-effects estimation), ``honest`` (pre-trend
sensitivity), ``synth`` (synthetic census and Monte Carlo), ``cli``.
"""

__version__ = "0.1.0"
