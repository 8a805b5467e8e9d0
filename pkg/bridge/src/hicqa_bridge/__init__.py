"""Raw-data export bridge for the consistency-filtering pipeline."""

__version__ = "0.1.0"

from .bridge import BridgeConfig, encode_corpus  # noqa: F401
from .encoders import BridgeError  # noqa: F401
