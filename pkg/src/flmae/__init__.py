"""flmae: desk-scale federated masked-autoencoder pretraining simulator.

Client-side sharpness-aware local training, server-side checkpoint averaging,
pluggable robust aggregation strategies, non-IID partitioning of a synthetic
corpus, and the evaluation/accounting tooling to compare them.
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
