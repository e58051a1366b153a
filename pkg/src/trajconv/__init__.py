"""Convolutional pedestrian trajectory forecasting on a small numpy autodiff core."""

__version__ = "0.1.0"

from .models import ModelSpec, build_model  # noqa: E402
from .social import SocialConfig  # noqa: E402
from .train import TrainConfig, train_run  # noqa: E402
from .estimator import TrajectoryForecaster  # noqa: E402

__all__ = ["ModelSpec", "SocialConfig", "TrainConfig", "TrajectoryForecaster", "build_model", "train_run",
           "__version__"]
