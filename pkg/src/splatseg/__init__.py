"""Interactive segmentation and editing engine for dynamic Gaussian-splat scenes.

The pipeline: ingest a dynamic splat scene (canonical Gaussians + keyframed
deformation deltas + cameras), learn a 32-d per-Gaussian semantic feature
field from multi-object 2D masks with a hard-pair contrastive objective,
cluster the field into object groups, and serve click/mask-prompt
segmentation plus object-level edits over rendered novel views.
"""

from .errors import (BehindCameraError, ConfigError, DegenerateClusteringError,
                     EmptySceneError, FormatError, NoObjectError, SplatsegError)
from .scene import (CameraView, DeformationTrack, DynamicScene, GaussianSet,
                    apply_deformation, load_scene, project_point, save_scene,
                    unproject_point)
from .rasterizer import (ColorLossConfig, PixelWeights, RenderOutput,
                         color_loss, rasterize, ssim)
from .sh import eval_sh
from .mask_codec import (ManifestEntry, MaskSet, decode, encode, load_manifest,
                         load_maskset, sample_masks, save_maskset, write_manifest)
from .feature_learn import (ContrastBatch, FeatureField, TrainConfig,
                            backprop_to_features, build_batch, loss_pmc,
                            pca_compress, smooth_features, train)
from .segmentation import (ClusterMap, SegConfig, cluster, filter_cluster,
                           render_segmentation, score)
from .editing import (ClickPrompt, Selection, click_to_cluster, compose,
                      mask_to_clusters, recolor, remove_objects)
from .synth import SynthResult, SynthSpec, generate
from .oracles import oracle_dbscan, oracle_render
from .benchmark import BenchReport, run_benchmark

__version__ = "0.1.0"
