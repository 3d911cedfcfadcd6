"""Performance-based architecture search over binarized convolution cells."""

from .binary import BinarizedKernel, amplitude_loss, binarize, grad_amplitude, grad_kernel
from .search import SearchConfig, run_search
from .supernet import DerivedNetwork, Genotype, Network, NetworkConfig, derive_genotype

__version__ = "0.1.0"

__all__ = [
    "BinarizedKernel",
    "DerivedNetwork",
    "Genotype",
    "Network",
    "NetworkConfig",
    "SearchConfig",
    "amplitude_loss",
    "binarize",
    "derive_genotype",
    "grad_amplitude",
    "grad_kernel",
    "run_search",
    "__version__",
]
