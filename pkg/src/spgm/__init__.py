"""Single-path speech separation with global pooling and modulation (SPGM) blocks."""
from spgm.tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "no_grad", "__version__"]
