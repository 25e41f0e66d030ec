"""Lagrangian fluid ground truth (SPH) and a learned graph-network simulator.

Submodules: ``core`` (periodic box, frames, trajectories), ``neighbor``
(cell-list radius search), ``sph`` (transport-velocity solver and cases),
``dataset`` (binary trajectories and splits), ``features`` (graph samples,
normalization, spherical harmonics), ``gns`` (model, gradients, Adam,
checkpoints), ``evalx`` (rollouts and metrics), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
