"""bridgecodec: dual-representation speech-feature codec + sparse-token AR generator."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor  # noqa: F401
from .config import Config  # noqa: F401
from .features import DenseFeatures, SyntheticCorpusSpec, Utterance  # noqa: F401
from .sparse_bridge import CodeMatrix, SparseBridge, SparseToken  # noqa: F401
from .dense_bridge import DenseBridge  # noqa: F401
from .ar_model import ArModel, ArSession, TextVocab  # noqa: F401
