"""Gaze estimation through a pictorial gazemap bottleneck, on a small numpy autodiff engine."""
from .geometry import (GazeAngles, GazemapSpec, IrisEllipse, angles_to_vector, angular_error_deg,
                       iris_center, iris_ellipse, render_gazemap, vector_to_angles)
from .models import GazeNet, NetworkConfig, build_full_pipeline, count_parameters, get_preset
from .tensor import ParameterStore, Tape, Tensor
from .training import TrainConfig, cross_validate, evaluate, get_train_preset, train, train_fold

__version__ = "0.1.0"
