"""Boundedly rational agents: KL-regularised PPO with supertypes, oracles and calibration."""

__version__ = "0.1.0"
