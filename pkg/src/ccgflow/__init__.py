"""Cell-centered Galerkin and interior-penalty DG tools for miscible flow."""

__version__ = "0.1.0"
