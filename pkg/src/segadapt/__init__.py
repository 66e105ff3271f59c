"""segadapt: source-free BN-statistics domain adaptation for segmentation.

The pipeline, end to end: train a small BN-equipped segmentor on synthetic
source data, snapshot its normalisation statistics and affine pairs, then
adapt to an unlabelled target domain by blending batch statistics against
the snapshot under a decaying momentum while regularising the affine pairs
with transferability-weighted consistency, annealed self-entropy, and
memory-consistent pseudo-label self-training.
"""

__version__ = "0.1.0"

from .batchnorm import BNState, EMDSchedule, emd_momentum  # noqa: F401
from .engine import AdaptConfig, adapt, evaluate, train_source  # noqa: F401
from .network import (SegmentorSpec, build_segmentor,  # noqa: F401
                      load_checkpoint, save_checkpoint)
from .synthdata import DataSpec, load_dataset, write_dataset  # noqa: F401
from .tensor import Tensor, backward, no_grad  # noqa: F401
