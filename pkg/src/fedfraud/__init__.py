"""Federated fraud detection on synthetic payment data.

Synthetic multi-site transaction generation, a small numpy MLP trained with
focal loss, FedAvg / FedProx / FedOpt plus Local and Central baselines,
sample-level DP-SGD with RDP accounting, a framed TCP transport and
gradient-based feature attribution.
"""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
