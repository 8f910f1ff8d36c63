"""cubesplat: feed-forward differentiable Gaussian splatting from point clouds.

A masked point cloud is normalized into the unit cube, pooled into a dense
voxel feature volume, decoded into Gaussian primitives (mean offset,
quaternion, scales, color, opacity, semantic feature), and rasterized into
color/depth/feature maps by front-to-back alpha blending. Training aligns
the renders with posed targets via photometric, masked-depth, and
feature-cosine losses through a reverse-mode tape.

Hot kernels run through numba; set ``CUBESPLAT_NO_NUMBA=1`` for the
pure-numpy fallback.
"""

from .errors import (DegenerateInputError, FormatError, InvalidInputError,
                     PipelineStageError)
from .geometry import (Camera, GaussianPrimitive, ProjectedGaussian,
                       SimilarityTransform, build_covariance, eval_gaussian_2d,
                       project_gaussian, quat_to_rotation, similarity_apply,
                       similarity_apply_camera)
from .losses import (LossReport, LossWeights, cosine_alignment, loss_dep,
                     loss_img, loss_sem, loss_total)
from .nets import (DecodedGaussians, DecoderSet, EncoderParams, Mlp,
                   ModelParams, decode_gaussians, densify, encode_points,
                   init_model, mlp_forward, project_features, tape_backward)
from .optim import OptimizerState, adamw_step, init_state, lr_at
from .pipeline import (SceneSample, TrainConfig, View, evaluate_scene, fit,
                       forward_scene, mock_feature_targets, sample_views,
                       similarity_probe, train_step)
from .splatter import (RenderOutput, TileConfig, brute_force_render, psnr,
                       rasterize, rasterize_nodes)
from .tape import Node, Tape
from .voxelizer import (DenseVolume, GridSpec, MaskConfig, PointCloud, anchors,
                        mask_points, normalize_to_cuboid, scatter_mean,
                        voxel_index)

__version__ = "0.1.0"
