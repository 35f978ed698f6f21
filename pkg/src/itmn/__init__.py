"""Desk-scale inverse tone mapping network with a GAN regularizer.

A U-Net generator maps LDR images to HDR targets, trained against a CNN
discriminator with a hybrid content loss, on a first-party tape-based
autodiff engine. Includes HDR codecs, dataset synthesis, quality metrics,
and a CLI tying the pipeline together.
"""

from .tensor import (BatchNormState, ShapeError, Tape, Tensor, backward,
                     pause_recording)
from .loss import LossWeights, adv_regularizer, content_loss, diff_x, diff_y, mse
from .nn import (Discriminator, Generator, LayerSpec, build_discriminator,
                 build_generator, discriminator_forward, generator_forward,
                 load_params, save_params)
from .train import (NonFiniteError, OptStates, RmsPropState, TrainConfig,
                    TrainLog, lr_at, rmsprop_step, train_loop, train_step)
from .hdrio import (HdrImage, HdrIoError, LdrImage, read_pfm, read_pnm,
                    read_rgbe, write_pfm, write_pnm, write_rgbe)
from .dataset import (ArrayPairs, DatasetIndex, PairRecord, SynthConfig,
                      luminance, normalize_hdr_target, reinhard_tmo, resize,
                      sample_batch, synth_pairs)
from .metrics import MetricsConfig, MetricsReport, evaluate_dirs, log_psnr, mpsnr, ssim

__version__ = "0.1.0"
