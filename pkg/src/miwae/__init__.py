"""Deep latent variable models for incomplete data: importance-weighted
training on the observed entries, and imputation by self-normalised importance
sampling or importance resampling."""

__version__ = "0.1.0"

from .bounds import TrainConfig, loglik_estimate, miwae_bound, train  # noqa: E402
from .data import MaskedMatrix, corrupt_mcar, imputation_mse, load_csv  # noqa: E402
from .estimator import MIWAEImputer  # noqa: E402
from .imputation import impute_multiple, impute_single  # noqa: E402
from .model import DlvmModel, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "DlvmModel", "MIWAEImputer", "MaskedMatrix", "TrainConfig", "corrupt_mcar",
    "impute_multiple", "impute_single", "imputation_mse", "load_checkpoint",
    "load_csv", "loglik_estimate", "miwae_bound", "save_checkpoint", "train",
]
