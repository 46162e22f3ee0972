"""fairdiff: a desk-scale diffusion lab for steering generated attribute
frequencies toward a user-supplied reference distribution.

Train a small denoiser on attributed synthetic data, fit per-step linear
attribute heads on the denoiser's bottleneck activations, then guide batched
DDIM sampling so the batch attribute distribution matches the reference.
"""

from .numkit import Mlp, RngStream, gaussian_sample, init_mlp, load_mlp, save_mlp
from .synthdata import (AttributedMixture, LabeledSample, ReferenceDistribution,
                        default_world, log_density, sample_dataset,
                        true_attribute_fraction, uniform_reference)
from .diffcore import (NoiseSchedule, SampleRun, Trajectory, ddim_invert,
                       ddim_predict_x0, ddim_step, default_schedule,
                       forward_diffuse, make_schedule, sample_batch,
                       train_denoiser, DenoiserTrainConfig)
from .hspace import (AttributeDistributionEstimate, HClassifierBank, HDataset,
                     adp_estimate, adp_gradient, build_hdataset, classify_h,
                     chi_square_distance, joint_bank, train_hbank,
                     HBankTrainConfig)
from .guidance import (GuidanceConfig, distribution_hook, latent_edit_hook,
                       run_guided_generation, sample_hook, universal_hook,
                       compute_edit_directions, make_quota_assignment)
from .metrics import (EvalClassifier, EvalTrainConfig, FairnessReport,
                      QualityScore, fairness_discrepancy, quality_score,
                      subgroup_report, train_eval_classifier)

__version__ = "0.1.0"
