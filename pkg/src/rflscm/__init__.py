"""Angular power spectrum recovery from multi-beam RSRP with low-rank radio fields."""

from .errors import (ConfigError, NonconvergentEtalonError, RflscmError, SingularInterfaceError,
                     SingularMediumError, TrainingDivergedError)
from .fdam import EmParams, fdam, fdam_series_oracle
from .geometry import AngularGrid, PointCloudConfig, PointCloudIndex, SceneBounds
from .renderer import Cell, RayConfig, RfModel
from .sensing import AntennaArray, BeamCodebook, build_sensing_matrix
from .trainer import HiTamConfig, LossConfig, ModelConfig, RfLscm, TrainConfig, train
from .wnomp import WnompConfig, wnomp_solve

__version__ = "0.1.0"

__all__ = [
    "AngularGrid", "AntennaArray", "BeamCodebook", "Cell", "ConfigError", "EmParams", "HiTamConfig",
    "LossConfig", "ModelConfig", "NonconvergentEtalonError", "PointCloudConfig", "PointCloudIndex",
    "RayConfig", "RfLscm", "RfModel", "RflscmError", "SceneBounds", "SingularInterfaceError",
    "SingularMediumError", "TrainConfig", "TrainingDivergedError", "WnompConfig", "build_sensing_matrix",
    "fdam", "fdam_series_oracle", "train", "wnomp_solve",
]
