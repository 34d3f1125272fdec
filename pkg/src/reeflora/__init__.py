"""LoRA-adapted vision transformer for multi-label coral reef condition classification."""
import os as _os

# Reductions in BLAS are only reproducible for a fixed thread count.
_threads = _os.environ.get("REEF_LORA_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .head import CLASS_NAMES  # noqa: E402
from .lora import LoraConfig, count_trainable  # noqa: E402
from .model import ReefClassifier, build_model  # noqa: E402
from .vit import ModelConfig  # noqa: E402

__version__ = "0.1.0"
__all__ = ["CLASS_NAMES", "LoraConfig", "ModelConfig", "ReefClassifier", "build_model", "count_trainable"]
