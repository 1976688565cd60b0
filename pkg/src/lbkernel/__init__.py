"""Heat kernel regression and random field inference on triangle meshes."""

__version__ = "0.1.0"
