"""Candidate mask selection by graph reasoning under attribute guidance."""
from .config import RunConfig, load_config, preset
from .errors import (ArgumentError, ConfigError, ContractError, DegenerateInputError, GenerationError,
                     NumericDomainError, ParseError, ShapeError, STGRError, ValidationError)
from .estimator import MaskSelector, check_scenes
from .evaluation import CVResult, FoldReport, emit_report, kfold_split, run_cv
from .graph import SelectionResult, build_edges, stgr_forward
from .masks import Mask, mask_iou
from .metrics import dsc, iou_metric
from .synth import PhantomConfig, Scene, derive_seed, generate_dataset, generate_scene, load_dataset

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "preset", "MaskSelector", "check_scenes", "CVResult", "FoldReport",
    "emit_report", "kfold_split", "run_cv", "SelectionResult", "build_edges", "stgr_forward", "Mask",
    "mask_iou", "dsc", "iou_metric", "PhantomConfig", "Scene", "generate_dataset", "generate_scene",
    "load_dataset", "derive_seed", "ArgumentError", "ConfigError", "ContractError", "DegenerateInputError",
    "GenerationError", "NumericDomainError", "ParseError", "ShapeError", "STGRError", "ValidationError",
]
