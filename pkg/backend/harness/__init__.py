"""Synthetic world, configuration, checkpoints and the experiment drivers."""
