"""Federated hierarchical linear regression."""

from .datasets import DeviceDataset, FederatedDataset, SyntheticCaseSpec, gen_case
from .ep import EpAlgorithm, EpConfig
from .gaussian import NaturalGaussian
from .hm1 import Hm1Algorithm, Hm1Config
from .models import make_spec
from .runtime import RoundConfig, run_rounds

__version__ = "0.1.0"

__all__ = [
    "DeviceDataset",
    "FederatedDataset",
    "SyntheticCaseSpec",
    "gen_case",
    "EpAlgorithm",
    "EpConfig",
    "NaturalGaussian",
    "Hm1Algorithm",
    "Hm1Config",
    "make_spec",
    "RoundConfig",
    "run_rounds",
]
