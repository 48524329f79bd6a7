"""Contrastive pretraining of an image-domain feature extractor for undersampled MRI reconstruction."""

from .autodiff import Tensor, RMSProp
from .config import PretrainConfig, SynthConfig, TrainConfig
from .contrastive import clmri_loss, collect_latents, pretrain
from .kspace import ComplexImage, SamplingMask, fft2c, ifft2c, make_mask
from .models import CascadeDC, DCConfig, FeatureExtractor, PlainCNN, build_reconstructor
from .phantoms import read_dataset, synthesize_dataset, write_dataset
from .training import evaluate_reconstruction, infer, train_reconstructor

__version__ = "0.1.0"
