"""Differentiable dynamic Gaussian splatting with texture-intensity supervision.

Modules: ``scene`` (cloud, camera, checkpoints), ``raster`` (forward and
backward splatting), ``texture`` (Sobel maps), ``losses``, ``deformation``
(time-conditioned MLP), ``taco`` (optimizer with gated position noise),
``synth`` (synthetic scenes), ``train``, ``gradcheck``, ``plots`` and ``cli``.
"""
from .losses import GroundTruth, LossConfig, pcc, ssim, tadr_loss, tex_loss, total_loss
from .raster import Raster, RenderSettings, render, render_backward
from .scene import Camera, GaussianCloud, load_checkpoint, save_checkpoint
from .taco import NoiseConfig, TrainState, baseline_step, noise_gate, taco_step
from .texture import sobel_magnitude, sobel_ti, texture_map

__version__ = "0.1.0"
