"""Recurrent PPO agents on a partially observed gridworld, with trigger-activated
backdoors, internal-state analysis and a hidden-state monitor."""

__version__ = "0.1.0"
