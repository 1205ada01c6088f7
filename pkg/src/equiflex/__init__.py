"""equiflex: two-stage equity-aware local electricity market clearing.

Stage 1 clears a day-ahead local energy market on a radial feeder as a
mixed-integer second-order-cone dispatch, prices every bus from the duals of
the nodal balance rows, and applies an energy-burden-based price adjustment.
Stage 2 clears a real-time flexibility market that absorbs disturbances with
DER flexibility and distributes any remaining load curtailment fairly.
"""

__version__ = "0.1.0"

from . import conic, ders, grid

__all__ = ["conic", "ders", "grid", "__version__"]
