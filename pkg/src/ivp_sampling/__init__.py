"""Learning closed-loop optimal controllers from open-loop optimal data.

Modules: ``core`` (problems, rollouts, datasets), ``lqr`` (scalar benchmark
with closed forms), ``quadrotor`` (12-state landing problem), ``pmp``
(boundary-value solver), ``nn`` (numpy MLP), ``sampler`` (data-generation
strategies), ``metrics`` (cost ratios, mismatch, disturbances), ``cli``.
"""

__version__ = "0.1.0"
