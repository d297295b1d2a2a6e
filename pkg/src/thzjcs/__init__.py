"""Joint THz communication and sensing for vehicles: channel model, link
budget, heterogeneous GNN and assignment solvers."""

__version__ = "0.1.0"
