"""Evolving domain adaptation benchmark: self-training with buffers, DANN, metrics and MMD."""
from .core import Buffer, Domain, DomainStream, MaskedStream, RunConfig, Split, mask_target_labels
from .dann import DANNClassifier, DannSpec, run_dann
from .datagen import ShiftProfile, generate, load_records, stream_from_records
from .divergence import MmdMatrix, mmd2, mmd_matrix, median_heuristic_bandwidth
from .metrics import EvalReport, f_avg, macro_f1, paired_bootstrap, pearson_r, relative_gain
from .model import ArchSpec, SoftmaxClassifier, TrainHyper
from .selftrain import EvolvingSelfTraining, MethodTrace, run_method

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "Buffer", "DANNClassifier", "DannSpec", "Domain", "DomainStream", "EvalReport",
    "EvolvingSelfTraining", "MaskedStream", "MethodTrace", "MmdMatrix", "RunConfig", "ShiftProfile",
    "SoftmaxClassifier", "Split", "TrainHyper", "f_avg", "generate", "load_records", "macro_f1",
    "mask_target_labels", "median_heuristic_bandwidth", "mmd2", "mmd_matrix", "paired_bootstrap",
    "pearson_r", "relative_gain", "run_dann", "run_method", "stream_from_records",
]
