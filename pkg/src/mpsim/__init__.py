"""Trace-driven cycle-level simulator for multi-path (eager) execution with
variable per-path fetch rates."""

__version__ = "0.1.0"
