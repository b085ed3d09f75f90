"""Two-stage dense image alignment.

Stage 1 fits one or more homographies with RANSAC over multi-scale mutual
nearest-neighbour feature matches; stage 2 refines each candidate with a
per-pair optimized fine flow driven by an SSIM reconstruction, cycle
consistency and matchability objective.  Evaluation utilities cover dense
flow error, sparse correspondence accuracy and two-view relative pose.
"""

from .core import (AlignmentIteration, AlignmentResult, Correspondence,
                   DegeneracyError, FeatureMap, FlowField, FormatError,
                   Homography, Image, MatchabilityMap, bilinear_sample,
                   flow_from_displacement, identity_flow, resize_min_side,
                   resize_to, to_gray)
from .features import (DEFAULT_SCALES, MatchConfig, extract_dense_descriptors,
                       extract_multiscale, mutual_nn_match)
from .fineflow import (CorrelationVolume, FineFlowResult, FlowParams,
                       ObjectiveConfig, OptimizeSchedule, correlation_volume,
                       cycle_matchability, init_flow_from_correlation,
                       loss_gradient_check, optimize_fine_flow, ssim_map,
                       total_loss)
from .robust import (RansacConfig, fit_homography_dlt, multi_homography_decompose,
                     ransac_homography, symmetric_transfer_error,
                     warp_by_homography)
from .compose import (aggregate_flows, average_aligned, compose_homography_flow,
                      texture_transfer, warp_with_flow)
from .evaluate import (CameraIntrinsics, EssentialResult, RelativePose, aee,
                       decompose_essential, essential_from_flow, fl_all,
                       pose_angular_error, pose_map, sparse_accuracy)

__version__ = "0.1.0"
