"""Desk-scale backdoor defense lab: backdoored CNN, evolutionary trigger filter, BN repair."""

__version__ = "0.1.0"
