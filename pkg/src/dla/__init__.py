"""Static and dynamic layer attention on a small numpy autodiff engine."""

from .attention import AttentionConfig, LayerAttention
from .backbone import Network, NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .cells import CellParams, CellState, init_cell, param_count
from .datagen import Dataset, DatasetSpec, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, ProbeError
from .tensor import Tensor, backward, no_grad, reference_mode
from .training import TrainConfig, run_seeds, run_training

__version__ = "0.1.0"
