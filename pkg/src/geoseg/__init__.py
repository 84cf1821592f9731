"""Interactive segmentation engine: proposal and refinement networks, geodesic
scribble encoding, and a trainable patch-local mean-field CRF."""

__version__ = "0.1.0"
