"""Workload generation, consistency oracle, metrics and the command line."""
