"""Semi-supervised spatio-temporal action detection with a stable mean teacher.

Modules: ``types`` (data model), ``augment`` (weak/strong views), ``detector``
(base network), ``eor`` (error recovery U-Net), ``losses``, ``trainer``,
``metrics`` (f-mAP / v-mAP), ``synthdata`` (moving-shapes benchmark) and ``cli``.
"""

from .detector import Detector, DetectorConfig, init_detector
from .eor import EoRConfig, ErrorRecovery, init_eor
from .metrics import EvalReport, evaluate_outputs
from .synthdata import SynthConfig, generate_samples
from .trainer import MODES, TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Detector", "DetectorConfig", "EoRConfig", "ErrorRecovery", "EvalReport", "MODES",
           "SynthConfig", "TrainConfig", "evaluate_outputs", "generate_samples", "init_detector",
           "init_eor", "train"]
