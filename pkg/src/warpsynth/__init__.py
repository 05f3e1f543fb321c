"""Deformation-equivariant cross-modality image synthesis toolkit.

Joint training of a synthesis network with rigid/elastic cross-modality and
intra-modality registration networks, driven by equivariance-encouraging
similarity, commutation, and adversarial objectives, on a small
self-contained reverse-mode autodiff core.
"""

import os as _os

# the per-step matrix products are small; they run fastest (and bit-stably)
# single-threaded. WARPSYNTH_THREADS caps parallelism; explicit BLAS env
# settings win over both. Only effective if numpy is not yet imported.
_threads = _os.environ.get("WARPSYNTH_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from . import tensor, deform, losses, networks, metrics, datagen, trainer, fileio, selfcheck
from .tensor import Tensor, no_grad, grad_check, Adam, AdamState
from .deform import (Affine, Deformation, Image, Mask, RigidParams, SimDeformParams, Svf,
                     TransformConfig, compose, gaussian_svf, identity_map, jacobian_field,
                     rigid_to_deformation, sample_equivariance_transform,
                     second_derivative_field, simulate_deformation, svf_exp, warp, PRESETS)
from .losses import (LossReport, LossWeights, adversarial_losses, commutation_loss,
                     elastic_cross_sim, masked_l1, nonrigidity, reg_cross, reg_intra,
                     rigid_cross_sim, similarity_default, similarity_equivariance, total_loss)
from .metrics import MetricReport, mde, nmi, psnr, ssim
from .networks import Encoder, EncoderSpec, ModelBundle, UNet, UnetSpec, build_models, rigid_head
from .datagen import DatasetManifest, Dataset, Sample, channel_swap, generate_dataset, load_dataset, make_pair, procedural_image
from .trainer import (TrainConfig, Trainer, TrainingDiverged, evaluate_model, sample_patch,
                      select_best_epoch)

__version__ = "0.1.0"
