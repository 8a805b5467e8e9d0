"""Cross-modal consistency filtering for image-caption-QA corpora."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
