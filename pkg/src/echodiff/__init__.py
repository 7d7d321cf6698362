"""Mask-guided adversarial diffusion for echocardiography domain translation."""

from .config import ConfigError, RunConfig, load_config, parse_config
from .data import Dataset, GuidedSample, generate_phantoms, load_dataset, write_dataset
from .diffusion import NoiseSchedule, make_schedule, reverse_sample
from .metrics import MetricsReport, evaluate_translation, frechet_distance, psnr, ssim
from .models import Checkpoint, build_discriminator, build_generator, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, grad_check
from .training import train
from .translate import translate_dataset

__version__ = "0.1.0"
