"""Multi-view adaptive graph convolutions for whole-graph classification."""
from .errors import (
    DomainError, EncodingError, MvagcError, NonFiniteError, ParseError, ShapeError, SplitError,
)
from .graph import Graph, normalized_laplacian, rescale_laplacian
from .model import Model, LayerParams, classify, init_model
from .training import TrainConfig, compute_gradients, cross_validate, finite_difference_check, train
from .tu import Dataset, load_tu_dataset, stratified_kfold

__version__ = "0.1.0"
