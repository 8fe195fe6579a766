"""Planning and simulation toolkit for offloaded MoE inference on one CPU-GPU node."""

from .config import HardwareSpec, ModelSpec, Policy, WorkloadSpec, parse_config, validate

__version__ = "0.1.0"

__all__ = ["HardwareSpec", "ModelSpec", "Policy", "WorkloadSpec", "parse_config", "validate", "__version__"]
