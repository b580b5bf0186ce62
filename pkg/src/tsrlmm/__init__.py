"""Traffic sign recognition with large multimodal models and knowledge-augmented prompts."""

from __future__ import annotations

from .config import RecognitionConfig, RunConfigFile, load_config
from .dataset import ClassRef, DatasetManifest, SimilarityGroups, TemplateCatalog
from .extraction import ExtractionConfig, SignCrop, SignRegion, extract_signs
from .knowledge import MemoryBank, build_bank, load_bank
from .lmm import BackendConfig, MockBackend, RemoteBackend, make_backend
from .recognizer import Recognizer, recognize

__version__ = "0.1.0"

__all__ = [
    "BackendConfig",
    "ClassRef",
    "DatasetManifest",
    "ExtractionConfig",
    "MemoryBank",
    "MockBackend",
    "RecognitionConfig",
    "Recognizer",
    "RemoteBackend",
    "RunConfigFile",
    "SignCrop",
    "SignRegion",
    "SimilarityGroups",
    "TemplateCatalog",
    "build_bank",
    "extract_signs",
    "load_bank",
    "load_config",
    "make_backend",
    "recognize",
]
