"""Interactive deformable 3D registration with region-targeted refinement.

The engine warps a moving volume onto a fixed volume by optimizing a dense
per-voxel displacement field against an intensity loss — over the whole
image, or restricted to a reviewer-chosen box when a region lags behind.
"""

from .volume import (Volume3, SliceImage, FormatError, PayloadSizeError,
                     load_volume, save_volume, normalize_hu, denormalize,
                     extract_slice, window_level, rmse)
from .transform import (DisplacementField, RoiBox, warp, warp_jvp, dvf_stats,
                        save_dvf, load_dvf)
from .loss import (LossConfig, PartitionError, RegionPartition, RegionShare,
                   GradientShareReport, image_loss, loss_grad_dvf, objective,
                   smoothness, smoothness_grad, region_decompose, gradient_share)
from .engine import (OptimizerConfig, OptimizerState, adam_step, Stage, Session,
                     TraceEntry, LossTrace, RunSummary, RunConfig, NumericError,
                     StageError, IdentityInit, CoarseToFineInit, init_session,
                     run_iso, run_rso, workflow_decide, diagnose, export_trace,
                     trace_to_csv, trace_to_json, trace_from_json, ScheduledAction)
from .phantom import (PhantomSpec, PhantomPair, Ellipsoid, Lesion, GaussianBump,
                      ArtifactSpec, generate, generate_pair, ground_truth_dvf,
                      render_anatomy, lesion_roi, dvf_error)

__version__ = "0.1.0"
