"""Uncertainty-guided spatial pruning for video frame interpolation.

A desk-scale engine: a coarse-to-fine interpolation network whose per-scale
convolutions are skipped at spatial positions chosen by learned pruning
masks, supervised by labels derived from a separately trained per-pixel
uncertainty field, and executed at inference through gather/scatter sparse
convolution with exact FLOPs accounting.
"""

from .errors import (CheckpointError, ContractError, DimensionError,
                     FormatError, NumericalError, TrainingDiverged, UgspError)
from .tensor import (Parameter, Tensor, backward, conv2d, deconv, elu,
                     no_grad, prelu, zero_grads)
from .ops import (avg_downsample, bilinear_resize, census_distance,
                  gumbel_softmax, laplacian_l1, warp_backward)
from .sparse import (ActiveIndex, FlopsLedger, PruningMask, build_active_index,
                     flops_report, masked_conv_train, sparse_conv_infer)
from .losses import (LossWeights, mask_guidance_loss, overall_loss,
                     reconstruction_loss, self_contrast_loss, sparsity_loss)
from .uen import (MaskLabelSet, UncertaintyNet, alphas_for_sparsity,
                  load_labels, mask_labels_from_uncertainty, save_labels,
                  uncertainty_loss)
from .vfi import InterpolationNet, synthesize
from .data import (SyntheticTripletSet, Triplet, load_triplet_dir, read_ppm,
                   synth_triplet, write_ppm)
from .train import (AdamW, TrainConfig, cosine_lr, generate_labels,
                    tau_schedule, train_phase1, train_phase2)
from .eval import (BenchReport, benchmark, dense_flops, emit_maps,
                   load_any_model, observe_report, psnr,
                   ranked_error_intervals)

__version__ = "0.1.0"
