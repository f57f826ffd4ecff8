"""Instance-wise adaptive mixing of a primary loss with auxiliary losses.

Modules: ``nncore`` (MLP engine and SGD), ``losses``, ``metaopt`` (the
meta-learned mixing weights), ``data``, ``kd`` and ``rules`` (scenario
drivers), ``analysis`` and ``cli``.
"""

from .errors import ConfigError, UsageError
from .metaopt import MetaConfig, MixingWeights, RunResult, train_amal, train_fixed, train_supervised
from .nncore import MlpParams, SgdState, init_mlp

__all__ = ["ConfigError", "UsageError", "MetaConfig", "MixingWeights", "RunResult", "train_amal",
           "train_fixed", "train_supervised", "MlpParams", "SgdState", "init_mlp"]
__version__ = "0.1.0"
