"""Multi-scale gradient GAN with self-attention, plus its evaluation protocol."""
from .discriminator import (Discriminator, DiscriminatorConfig, build_discriminator, criticize,
                            pyramid_from_real)
from .generator import Generator, GeneratorConfig, build_generator, generate
from .layers import (AttentionParams, SelfAttention, SpectralNormState, converge_spectral_norm, minibatch_stddev,
                     pixel_norm, self_attention_forward, spectral_normalize)
from .losses import (gradient_penalty, relativistic_hinge_d, relativistic_hinge_g, wgan_g, wgan_gp_d)
from .metrics import (MetricReport, MSSSIMConfig, detect_mode_collapse, extract_features, fid,
                      ms_ssim_dataset, ms_ssim_pair)

__version__ = "0.1.0"
