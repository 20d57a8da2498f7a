"""EI² emotion/intent joint-understanding network on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import ContractError, DataError, DomainError, FormatError, MCEIUError, NumericError, ParseError, ShapeError
from .model import EI2Config, ModelState, forward, init_model
from .tensor import Tensor, backward, grad_check, no_grad, set_precision
from .training import TrainConfig, evaluate, fit, pretrain, train
