"""Differentiable face-model visualization toolkit.

A linear 3D face shape model, a weak-perspective camera, a splatting
renderer with analytic gradients with respect to every camera and shape
parameter, the matching losses and metrics, a landmark-based parameter
fitter, and a small end-to-end trainable stack of visualization blocks.
"""

from .camera import (CameraMatrix, LandmarkSet, ParamVector,
                     landmark_visibility, project_all, project_landmarks,
                     projection_jacobian)
from .data import FaceSample, generate_synthetic_dataset, load_annotation, save_annotation
from .fitting import FitOptions, fit_landmarks, initialize_params, jitter_bbox
from .losses import (LossWeights, build_weights, landmark_loss, mape, nme,
                     param_loss)
from .model import (ModelError, ModelFormatError, ShapeModel, ShapeParams,
                    compose_shape, compute_mask, compute_mask2,
                    compute_mean_normals, compute_vertex_normals,
                    default_feature_centers, generate_synthetic_model,
                    load_model, save_model)
from .network import (BlockConfig, TrainConfig, VisualizationNetwork,
                      default_block_config, evaluate, load_checkpoint,
                      save_checkpoint, train_toy)
from .raster import (RasterConfig, RasterError, VisualizationGradients,
                     VisualizationOutput, frontability,
                     frontability_camera_jacobian, gradient_maps,
                     rasterize_backward, rasterize_forward, rerender_frozen,
                     select_visible, view_depth)

__version__ = "0.1.0"
