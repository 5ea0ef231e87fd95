"""Configuration for the IDSM reconstruction project."""
