"""
Carrega os nomes principais do módulo flexmol.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    FeaturizeError,
    FlexMolError,
    LossError,
    ModalityError,
    ModelError,
    ParseError,
    ValidationError,
)
from .featurize import FeatureConfig, FeaturizedMolecule, featurize
from .losses import LossWeights
from .model import FlexMol, ModelConfig
from .molio import Batch, Bond, BondType, Molecule, collate, parse_jsonl, parse_sdf_v2000, write_jsonl
from .pretrain import TrainConfig, run_stage1, run_stage2

__version__ = "0.1.0"
__all__ = [
    "Batch",
    "Bond",
    "BondType",
    "CheckpointError",
    "collate",
    "ConfigError",
    "FeatureConfig",
    "featurize",
    "FeaturizedMolecule",
    "FeaturizeError",
    "FlexMol",
    "FlexMolError",
    "LossError",
    "LossWeights",
    "ModalityError",
    "ModelConfig",
    "ModelError",
    "Molecule",
    "parse_jsonl",
    "parse_sdf_v2000",
    "ParseError",
    "run_stage1",
    "run_stage2",
    "TrainConfig",
    "ValidationError",
    "write_jsonl",
]
