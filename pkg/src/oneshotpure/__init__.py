"""Two-step diffusion noise + one-shot GAN generator as an adversarial purifier.

Import the submodules directly for the full API; the common entry points are
re-exported here.
"""

from .attacks import AttackBudget, ThreatModel, apgd, build_threat_model, fgsm, pgd, run_attack
from .data_io import (Dataset, PurifierCheckpoint, load_checkpoint, load_dataset, make_synthetic,
                      save_checkpoint)
from .diffusion import VarianceSchedule, diffuse_step, diffuse_to, posterior_sample
from .errors import (CapabilityError, ConfigurationError, DegenerateScheduleError, IntegrityError, ParameterError,
                     ParseError, PurifyError, TrainingDivergedError, ValidationError)
from .evaluation import (AttackConfig, EvalReport, LatencyStats, adversarial_examples, clean_accuracy,
                         emit_report, latency_benchmark, robust_accuracy)
from .metrics import ssim, ssim_loss
from .networks import Classifier, Discriminator, Generator
from .purifier import Pipeline, Purifier, purify_iterative, purify_oneshot
from .training import TrainConfig, train_bgan, train_classifier, train_ddpm_denoiser, train_lightpure

__version__ = "0.1.0"
