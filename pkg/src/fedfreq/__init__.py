"""Multi-frequency federated human activity recognition on a small numpy autodiff engine."""

from .autodiff import HyperParams, Tensor
from .dsp import RawStream, SensorWindow
from .fed import aggregate, centralized_train, local_train, run_rounds
from .harness import ExperimentConfig, emit_report, run_matrix, run_participant_ablation
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, ParamTree, deserialize, forward, init_params, serialize

__version__ = "0.1.0"
