"""Bridge between real checkpoints and the adapter-transplant toolkit.

Exports weights, vocabularies, and calibration activations from supported
checkpoints into the toolkit's file formats, and runs the short
post-transplant fine-tuning step a transplant's recipe file describes.
The two packages share bytes, never code.
"""

from .errors import BridgeError, DataError
from .exporting import (ExportJob, ExportedModel, export_activations,
                        export_weights, reexport_weights)
from .formats import (AdapterBundle, read_adapter, read_archive,
                      read_manifest, write_activations, write_adapter,
                      write_archive, write_manifest, write_vocab)
from .hfmodel import CheckpointInfo, inspect_checkpoint, load_checkpoint_tensors
from .lft import LftReport, run_lft

__version__ = "0.1.0"

__all__ = [
    "AdapterBundle", "BridgeError", "CheckpointInfo", "DataError",
    "ExportJob", "ExportedModel", "LftReport", "export_activations",
    "export_weights", "inspect_checkpoint", "load_checkpoint_tensors",
    "read_adapter", "read_archive", "read_manifest", "reexport_weights",
    "run_lft", "write_activations", "write_adapter", "write_archive",
    "write_manifest", "write_vocab",
]
