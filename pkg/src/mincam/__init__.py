"""Simulate and train minimalist cameras built from freeform pixels."""

from .autodiff import Tensor, backward  # noqa: F401
from .errors import ConfigError, ContractError, DataError, DimensionError, DivergenceError, FormatError  # noqa: F401
from .network import MlpConfig, Network, forward, init_network, predict_count  # noqa: F401
from .scenes import ArrayDataset, Dataset, SceneSpec, generate_dataset, generate_scene, make_dataset  # noqa: F401
from .sensor import HARDWARE, PHOTODETECTOR, MaskBank, SensorConfig, box_mask_bank, pixel_forward  # noqa: F401
from .trainer import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train  # noqa: F401

__version__ = "0.1.0"
