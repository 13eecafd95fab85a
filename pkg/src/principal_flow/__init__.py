"""Principal flows: unit-speed neural velocity fields fitted to planar point clouds."""
__version__ = "0.1.0"
