"""Channel max pooling (CMP) layer and a small numpy CNN library around it."""
from .cmp import CmpCache, CmpConfig, cmp_backward, cmp_forward, make_cmp_config, suggest_stride
from .errors import (
    BuildError,
    CmpNetError,
    DivergenceError,
    FormatError,
    InvalidCmpConfig,
    NoValidStride,
    ShapeError,
)
from .tensor import Rng

__version__ = "0.1.0"
