"""Joint BEV detection and multi-modal trajectory forecasting with
appearance-guided past-motion refinement, trained on procedural scenes."""

__version__ = "0.1.0"
