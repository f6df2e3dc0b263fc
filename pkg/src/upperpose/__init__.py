"""Upper-body expressive pose-and-shape pipeline on synthetic data."""

from .autograd import Tensor, gradcheck, no_grad
from .body import (BodyTemplate, MeshOutput, SmplxParams, build_template,
                   forward_kinematics, pose_mesh, project_weak_perspective,
                   skin_mesh)
from .config import RunConfig, load_config
from .errors import (ConfigError, DimensionError, IntegrityError, NumericError,
                     UpperPoseError)
from .foreground import ForegroundExtractor, PfeConfig
from .interaction import PartBoxes, PartFeatureSet, RegressionOutput
from .metrics import (LossBreakdown, MetricReport, loss_bbox, loss_kpts,
                      loss_param, mpvpe, pa_mpvpe, procrustes_align, total_loss)
from .model import UpperBodyModel
from .training import Adam, ablate, build_model, evaluate, restore_model, train

__version__ = "0.1.0"
