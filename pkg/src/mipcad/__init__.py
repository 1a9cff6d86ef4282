"""Lung nodule detection from sliding-slab maximum intensity projections.

The torch-free core is re-exported here; the networks live in
``mipcad.detect2d`` and ``mipcad.fpr3d`` and orchestration in
``mipcad.pipeline``.
"""

from importlib.metadata import PackageNotFoundError, version

from .ct_ingest import CtVolume, NoduleAnnotation, load_annotations, load_volume, normalize_hu, resample_z
from .errors import ContractError, DependencyError, MipCadError, ParameterError
from .evaluation import froc, match_candidates, stage1_metrics
from .lungseg import apply_mask, segment_lungs
from .merge import Candidate, fuse_streams, stream_candidates
from .mip import MipStack, build_mip_stack, build_mip_stacks

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "Candidate",
    "ContractError",
    "CtVolume",
    "DependencyError",
    "MipCadError",
    "MipStack",
    "NoduleAnnotation",
    "ParameterError",
    "apply_mask",
    "build_mip_stack",
    "build_mip_stacks",
    "froc",
    "fuse_streams",
    "load_annotations",
    "load_volume",
    "match_candidates",
    "normalize_hu",
    "resample_z",
    "segment_lungs",
    "stage1_metrics",
    "stream_candidates",
]
