"""Bi-directional displacement and strain estimation for RF ultrasound
elastography: synthetic phantoms, a variational solver for the forward and
backward fields, least-squares strain and evaluation metrics."""

__version__ = "0.1.0"

from .errors import (BistrainError, DegenerateInputError, GridFormatError,
                     InvalidConfigError, InvalidInputError, InvalidSpecError,
                     NumericalError)
from .signal import MultiChannelFrame, RfFrame, analytic_signal, build_channels
from .warp import BiDisplacement, DisplacementField, warp_gradient, warp_image
from .loss import (LossBreakdown, LossWeights, charbonnier, consistency_loss,
                   data_loss, smoothness_loss, total_loss, total_loss_gradient)
from .phantom import GroundTruth, Inclusion, PhantomSpec, render_pair
from .solver import SolverConfig, StepRule, estimate
from .strain import StrainField, lsq_strain
from .metrics import MetricReport, MetricWindows, Rect, cnr, friedman, patch_sweep, sr, ssim
