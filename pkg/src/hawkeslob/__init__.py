"""Hawkes-driven limit order book simulation and its scaling limit.

Subpackages:

- ``hawkes``: Hawkes random measures and thinning simulation
- ``micro``: the event-by-event order book model and its diagnostics
- ``volterra``: the coupled Volterra-Fredholm intensity solver
- ``limit``: time stepping for the limiting SDE-ODE-integral system
- ``oracles``: closed forms and reduced models used as references
- ``harness``: convergence experiments and statistical checks
- ``config`` / ``cli``: run configuration and command-line entry points
"""

__version__ = "0.1.0"
