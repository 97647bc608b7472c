"""Recurrent PPO forex trader with an unsupervised auxiliary-label head."""

__version__ = "0.1.0"
