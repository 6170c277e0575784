"""Multi-level (global / object / relation) contrastive vision-language training."""

from .estimator import MultiLevelCLIP

__version__ = "0.1.0"
__all__ = ["MultiLevelCLIP", "__version__"]
