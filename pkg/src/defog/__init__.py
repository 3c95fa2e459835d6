"""Wavelet/Fourier two-branch dehazing toolkit built on a numpy autodiff core."""

from .data import asm_synthesize, gamma_harmonize, synth_pairs
from .engine import evaluate, plan_tiles, tiled_inference, train
from .fft import irfft2, rfft2
from .losses import psnr, ssim, total_loss
from .network import Discriminator, Generator, ModelConfig, describe
from .tensor import Tensor
from .wavelet import dwt2, idwt2

__version__ = "0.1.0"

__all__ = [
    "Discriminator", "Generator", "ModelConfig", "Tensor",
    "asm_synthesize", "describe", "dwt2", "evaluate", "gamma_harmonize",
    "idwt2", "irfft2", "plan_tiles", "psnr", "rfft2", "ssim",
    "synth_pairs", "tiled_inference", "total_loss", "train",
]
