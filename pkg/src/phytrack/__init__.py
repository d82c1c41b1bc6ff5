"""Online multi-object tracking of phytoplankton in microscopy video."""

from .data_synth import NoiseSpec, SequenceConfig, corrupt_sequence, synth_sequence
from .metrics import EvalReport, evaluate
from .model import ModelConfig, PhyTrackerNet
from .motio import MotRow, read_mot, write_mot
from .tracker import OnlineTracker, TrackerConfig, track_sequence

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "ModelConfig", "MotRow", "NoiseSpec", "OnlineTracker", "PhyTrackerNet",
    "SequenceConfig", "TrackerConfig", "corrupt_sequence", "evaluate", "read_mot",
    "synth_sequence", "track_sequence", "write_mot",
]
