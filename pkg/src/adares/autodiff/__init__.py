from .tensor import Tape, Tensor, current_tape
from .gradcheck import grad_check, grad_check_params

__all__ = ["Tape", "Tensor", "current_tape", "grad_check", "grad_check_params"]
