"""Sensor-agnostic Earth observation foundation model toolkit.

Hypernetwork-generated patch embeddings for spectral and non-spectral modalities,
Fourier-encoded metadata, masked-image-modeling pretraining with distillation,
frozen-encoder benchmarking and grid-embedding climate regression.
"""

from .backbone import Encoder, EncoderConfig, EncoderOutput, ModalitySpec, default_modalities, load_encoder, save_encoder
from .encodings import EncodingRangeRegistry, FourierEncodingConfig, fourier_encode, fourier_features, frequencies
from .metadata import MetadataEncoder, MetadataRecord

__all__ = [
    "Encoder",
    "EncoderConfig",
    "EncoderOutput",
    "EncodingRangeRegistry",
    "FourierEncodingConfig",
    "MetadataEncoder",
    "MetadataRecord",
    "ModalitySpec",
    "default_modalities",
    "fourier_encode",
    "fourier_features",
    "frequencies",
    "load_encoder",
    "save_encoder",
]
__version__ = "0.1.0"
