"""Atom-laser output coupling from a trapped condensate under gravity."""

__version__ = "0.1.0"
