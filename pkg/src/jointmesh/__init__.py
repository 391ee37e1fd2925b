"""Multi-component organ meshes with shared walls, fit to labeled volumes."""

__version__ = "0.1.0"
