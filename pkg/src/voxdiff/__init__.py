"""voxdiff: conditional diffusion over semantic 3D occupancy grids.

Synthetic voxel scenes with simulated sensor visibility, a categorical
diffusion model over labels (plus a Gaussian one-hot-relaxation variant),
classifier-free and classifier guidance, a feed-forward completion baseline,
and occlusion-aware IoU evaluation.
"""

from .grids import (FREE, CLASS_NAMES, SceneSpec, VisibilityMask, VoxelGrid,
                    build_observation, compute_visibility, corrupt_labels, generate_scene)
from .schedule import NoiseSchedule, make_schedule, uniform_transition, cumulative_transition
from .discrete import (forward_sample_discrete, posterior_discrete, model_reverse_distribution,
                       training_loss_discrete, sample_occupancy, subset_timesteps)
from .continuous import (Triplane, decode_argmax, forward_sample_gaussian, onehot_relax,
                         pool_to_triplane, posterior_coeffs_gaussian, reverse_step_gaussian,
                         sample_latent, triplane_lookup)
from .guidance import ClassifierScorer, cfg_combine, cg_adjust
from .network import (Baseline, Denoiser, backprop, condition_payload, grad_check,
                      init_params, time_embedding)
from .metrics import (DiversitySummary, IoUAccumulator, MetricsReport, masked_suite,
                      miou_report, sample_diversity, visibility_probability)
from .training import (BaselineConfig, Dataset, TrainConfig, make_dataset,
                       sample_from_checkpoint, train_baseline, train_diffusion)
from .estimators import BaselineOccupancyClassifier, DiffusionOccupancyModel
from .io import read_grid, read_mask, write_grid, write_mask, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
