"""splitback: desk-scale simulator for cooperative backdoor attacks on
split vertical federated learning.

The package is organized by pipeline stage: data (datasets, vertical
partitions), nn / models (the differentiable kernel and party models),
graph (adversary coordination), inference (label inference via hybrid
VAE + metric learning), trigger (distributed trigger construction and
implanting), protocol (the split training loop with optional gradient
noising defense), metrics (attack/utility metrics and the convergence
bound), config / experiment / cli (experiment orchestration).
"""

__version__ = "0.1.0"

from .errors import SplitbackError  # noqa: F401
