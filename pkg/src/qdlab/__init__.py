"""qdlab: a desk-scale laboratory for quantized-network robustness.

Train small convolutional classifiers with k-bit activation quantization
and an orthogonality regularizer that keeps layers non-expansive, attack
them with standard infinity-norm methods, and measure how perturbations
grow through depth.
"""

from .attacks import AttackConfig, bim, fgsm, pgd, pgd_schedule, r_fgsm, random_attack, run_attack, scale_eps
from .analysis import (AmplificationProfile, RobustnessReport, SweepGrid, evaluate,
                       layer_profile, normalized_distance, spearman, sweep)
from .data import Dataset, load_cifar10_binary, save_cifar10_binary, synth_blobs, synth_textures
from .defenses import (AdvTrainConfig, SqueezeConfig, adv_train_epoch, bit_depth_reduce,
                       feature_squeeze_detect, masking_warning, median_filter_2x2,
                       sample_epsilon, squeeze)
from .lipschitz import (AggregationCoeff, RegConfig, convex_aggregate, orthogonal_penalty,
                        project_coeff, reshape_conv_weight, spectral_norm, spectral_report,
                        total_loss, write_spectral_csv)
from .models import ConvBlockSpec, Model, ModelSpec, build_model, default_spec, transfer_attack
from .quantize import QuantConfig, quantize_tanh, quantize_uniform, quantized_relu6
from .tensor import (SGD, Tensor, Tape, backward, batchnorm, conv2d, cross_entropy, dense,
                     global_avg_pool, no_grad, relu6, sgd_momentum_step)
from .training import LossCurve, NanLossError, TrainConfig, lr_at_epoch, train

__version__ = "0.1.0"
