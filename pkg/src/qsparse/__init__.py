"""Block-scaled 4-bit quantization and a dense/sparse accelerator model for conv diffusion nets."""

from .errors import ConfigError, DomainError, FormatError, QSparseError
from .quant import BlockQuantizer, dequantize, quantize
from .sparsity import SparsityDetector, generate_trace

__version__ = "0.1.0"
