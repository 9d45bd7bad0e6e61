"""Airway segmentation with a nested-U (U2-net) saliency network trained by a
deeply supervised Dice loss, with CT preprocessing and connected-component
post-processing."""
from .errors import FormatError, NumericError, ValidationError
from .kernels import backend_name
from .losses import LossWeights, deep_supervision_loss, dice_loss, dsc
from .phantom import PhantomConfig, gen_phantom
from .postprocess import LabelMap, binarize, extract_largest, label_components, refine
from .preprocess import Volume, make_inputs, normalize_volume, split_train_test
from .tensor import Tensor, no_grad
from .train import (Checkpoint, LossCurve, TrainConfig, evaluate, load_checkpoint,
                    save_checkpoint, train)
from .u2net import (ParamStore, RSUSpec, SaliencyMaps, U2NetSpec, describe, init_params,
                    param_count, rsu_forward, u2net_forward)

__version__ = "0.1.0"
