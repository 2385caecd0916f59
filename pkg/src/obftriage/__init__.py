"""Obfuscation scoring and audit triage for EVM runtime bytecode."""

from .bytecode import CanonicalBytecode, canonicalize, decode, segment, skeleton_hash
from .errors import ObfTriageError, StageDependencyError, ValidationError
from .features import StructuralFeatures, extract_features
from .model import ModelConfig, preset
from .triage import ScoreRecord, build_queues, quantile

__version__ = "0.1.0"

__all__ = [
    "CanonicalBytecode", "ModelConfig", "ObfTriageError", "ScoreRecord", "StageDependencyError",
    "StructuralFeatures", "ValidationError", "build_queues", "canonicalize", "decode", "extract_features",
    "preset", "quantile", "segment", "skeleton_hash",
]
