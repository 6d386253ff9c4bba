"""Nodule/no-nodule chest radiograph pipeline built on numpy."""

__version__ = "0.1.0"
