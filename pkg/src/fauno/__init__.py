"""Edge task-offloading simulator with federated actor-critic agents and reference baselines."""

__version__ = "0.1.0"
