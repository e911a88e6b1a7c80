"""Key-value extraction with a switchable causal/bidirectional transformer.

Thin wrapper around the compiled `_pip_kie` extension: synthetic document
grids, two training stages plus an autoregressive baseline, and two decoders
(single-pass parallel mask-fill, token-by-token autoregressive).
"""

from ._pip_kie import *  # noqa: F401,F403
from ._pip_kie import __doc__ as _core_doc  # noqa: F401

__version__ = "0.1.0"
