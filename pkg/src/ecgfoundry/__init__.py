"""Self-supervised foundation models for 12-lead ECG at desk scale."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, ECGRecord, LabelSet, SplitSpec, SynthSpec, read_dataset, write_dataset
from .metrics import EvalReport, auprc, auroc, criteria, f1
from .model import FoundationModel, ModelConfig, count_params, init_params

__version__ = "0.1.0"
