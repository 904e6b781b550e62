"""Balanced joint face alignment and recognition on synthetic faces.

The package couples a minimal reverse-mode autodiff core with thin-plate
spline and projective spatial transformers, an alignment-strength metric
(ANME), landmark losses with learnable per-landmark weights and a learnable
template, and a benchmark harness over procedurally generated face images.
"""

from .alignment import (AlignmentMethod, AlignWeights, LossReport, Template,
                        anme, apply_method, compute_fixed_template, lmk_loss,
                        load_template, method_warp, reg_loss, save_template,
                        total_loss, warp_template)
from .autodiff import Tensor, no_grad
from .errors import (BalignError, DegenerateInputError, EmptySelectionError,
                     NanLossError, NotInvertibleError, OptimizerStateError,
                     PoseOutOfBoundsError, SingularFitError)
from .geometry import (AffineTransform, LandmarkSet, ProjectiveTransform,
                       TpsTransform, WarpGrid, apply_transform, fit_affine,
                       fit_projective, invert_warp_batch, load_landmarks,
                       make_grid, pixel_centers, regular_lattice,
                       save_landmarks, tps_from_stn_params, tps_solve)
from .nets import (SGD, AmSoftmaxConfig, am_softmax_loss, build_locnet,
                   build_recnet, load_checkpoint, lr_at_epoch, save_checkpoint)
from .pgmio import read_pgm, write_pgm
from .sampler import (Image, bilinear_backward, bilinear_forward,
                      sample_bilinear)
from .stn import ProjWarper, TpsWarper, warp
from .synthdata import (DatasetConfig, IdentitySpec, Pose, gen_dataset,
                        gen_identities, load_dataset, mean_face_layout,
                        pose_transform, render_sample)
from .train import (ExperimentConfig, RunResult, Trainer, load_trainer,
                    run_experiment)

__version__ = "0.1.0"
