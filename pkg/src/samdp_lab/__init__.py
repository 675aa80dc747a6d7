"""Observation-perturbation attacks and defenses for reinforcement learning.

Exact tabular checks of the attack-MDP reduction and the KL bound on an
adversary's gain, a small numpy network library, PPO, imitation-based
attacks, time-discounted robust training, desk-scale environments and an
experiment harness.
"""

__version__ = "0.1.0"
