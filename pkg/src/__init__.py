# MadVM energy-aware VM placement simulator
__version__ = "1.0.0"
