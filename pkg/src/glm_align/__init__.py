"""Cross-attention adapter aligning LM hidden states with a latent-diffusion denoiser's conditioning."""
from .adapter import AlignedEmbeddings, GLMAdapter, adapter_forward, adapter_gradients, cross_attention_layer
from .backbone import Backbone, HiddenStack, LatentImage, ReferenceEmbeddings
from .config import DESK, PAPER, RunConfig, ScaleProfile, load_config, preset, seeded_rng
from .diffusion import NoisedLatent, NoiseSchedule, build_schedule, f_noise, sample, tff_fuse, unet_score
from .inference import Pipeline, Round, TaskKind, interleave_generate
from .training import LossBreakdown, TrainState, loss_align, loss_ddpm, phi_schedule, train_step

__version__ = "0.1.0"
