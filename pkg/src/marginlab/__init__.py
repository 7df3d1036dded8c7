"""marginlab: margin-maximization adversarial training at desk scale.

Small networks, a from-scratch reverse-mode autodiff engine, every margin
quantity (logit, soft, Taylor, FAB, brute-force oracle), hinge and
exponential margin losses with implicit margin-parameter gradients,
FGSM/PGD/FAB attacks, and a config-driven experiment harness.
"""

from .attacks import AttackResult, AttackSpec, fab_attack, fgsm, pgd, robust_accuracy
from .autodiff import Tensor, backward, finite_diff_gradient, gradients, input_jacobian, stop_gradient
from .data import Dataset, gen_gaussian_blobs, gen_two_moons, load_cifar10_subset, split
from .harness import ExperimentConfig, export_plot_data, oracle_report, run_experiment, run_ladder, sweep
from .losses import (
    BatchLossReport,
    LossConfig,
    batch_loss,
    cross_entropy,
    exp_mm_term,
    hinge_mm_term,
    margin_param_gradient,
)
from .margins import (
    DegenerateGradientError,
    FabNoConvergenceError,
    MarginEstimate,
    NormSpec,
    UnboundedMarginError,
    fab_boundary_point,
    highest_nonlabel_class,
    logit_margin,
    oracle_margin,
    soft_logit_margin,
    taylor_margin,
)
from .nets import CnnSpec, InitSpec, Network, build_cnn, build_mlp, load_checkpoint, logits, predict, save_checkpoint
from .training import TrainConfig, TrainResult, cosine_lr, select_best, sgd_step, train

__version__ = "0.1.0"
