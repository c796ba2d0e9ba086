"""Implantable adaptive cells for U-Net skip connections.

Train a concat-skip U-Net, search a skip cell with partial-channel
differentiable search on the frozen network, discretize it, implant it and
train only the cell weights.
"""

from .cell import Genotype, discretize, genotype_from_json, genotype_to_json
from .data import SyntheticTaskSpec, generate_synthetic, load_arrays, make_splits
from .pipeline import StageConfig, dice_loss, dice_score, evaluate, implant_and_train, train_baseline
from .search import SearchConfig, run_search
from .search_space import OpKind, SearchSpaceConfig
from .unet import SkipMode, UNetConfig, build_unet, weight_digest

__version__ = "0.1.0"
