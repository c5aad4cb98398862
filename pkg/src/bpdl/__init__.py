"""Simulation and analysis toolkit for birth, death, competition and dispersal
particle systems and their mean-field and fluctuation limits."""
__version__ = "0.1.0"
