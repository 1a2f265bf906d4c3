"""Scale and geometry guidance for sliding-window diffusion video depth.

The denoising loop, guidance terms and evaluation run on synthetic scenes
with an oracle denoiser; see the README for the command-line tools.
"""

from .align import AffineParams, align_global, align_per_window, fit_affine
from .config import PRESETS, from_ini, preset, to_ini
from .errors import VDGuideError
from .geom import DepthMap, DepthSequence, Intrinsics, Pose
from .guide import (GuidanceConfig, IdentityCodec, NoiseSchedule, OracleDenoiser, StridedCodec,
                    VideoOracleDenoiser, denoise_window)
from .losses import GeometryContext, LossWeights, TrackSet, total_geometry_loss
from .metrics import absrel_delta1, absrel_per_window, mfc, trajectory_metrics
from .pipeline import PipelineConfig, RunResult, VideoInput, plan_windows, post_optimize, run_video
from .pose import RansacConfig, Trajectory, derive_trajectory, solve_pnp, solve_pnp_ransac
from .synth import CorruptionSpec, SceneSpec, corrupt, generate_scene

__version__ = "0.1.0"
