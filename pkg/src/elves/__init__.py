"""Storage compression for pre-trained model tensor files.

Whole-layer deduplication, distance encoding (DE) of repeated parameters,
exponent-less float encoding (ELF) and a lossless final stage, plus the
analysis tools used to measure how compressible a model corpus is.
"""

from .de import DeStream, de_compress, de_decompress, de_saving_report
from .elf import ElfBlock, elf_compress_block, elf_decompress_block, elf_restore, elf_transform, error_bound
from .model_store import ModelManifest, TensorMeta, flatten_float_layers, load_model, write_model
from .pipeline import CompressOptions, MethodTag, compress_corpus, decompress_corpus, select_stage2

__version__ = "0.1.0"

__all__ = [
    "CompressOptions",
    "DeStream",
    "ElfBlock",
    "MethodTag",
    "ModelManifest",
    "TensorMeta",
    "compress_corpus",
    "de_compress",
    "de_decompress",
    "de_saving_report",
    "decompress_corpus",
    "elf_compress_block",
    "elf_decompress_block",
    "elf_restore",
    "elf_transform",
    "error_bound",
    "flatten_float_layers",
    "load_model",
    "select_stage2",
    "write_model",
]
