"""Cross-modal synthesis, multi-level registration, and dual-branch
feature-decomposition fusion for unaligned PAT/MRI image pairs, with the
losses, two-stage trainer, phantom dataset generator, and metric suite."""

from .image import (Image, PhantomPair, augment, load_image, make_phantom_dataset,
                    make_phantom_pair, resize, save_image)
from .warpfield import (DeformationField, compose_fields, load_field, negate_field,
                        save_field, smoothness_loss, sobel_gradient, upsample_field, warp)
from .perceptual import (FeaturePyramid, PerceptualPyramid, gram_matrix,
                         perceptual_loss, pst_loss, style_loss)
from .synthesis import Generator, PatchDiscriminator, gan_losses, synthesis_forward
from .registration import (MultiLevelRegistration, bidirectional_similarity_loss,
                           registration_loss)
from .fusion import (CouplingLayer, DecomposedFeatures, DetailEncoder, FusionModel,
                     correlation_coefficient, decomposition_loss, fusion_gradient_loss,
                     fusion_intensity_loss, reconstruction_loss, ssim,
                     stage1_fusion_loss, stage2_fusion_loss)
from .metrics import (MetricReport, evaluate_fusion, evaluate_registration, fmi,
                      fusion_mi, mutual_information, normalized_cross_correlation,
                      normalized_mutual_information, qabf, spatial_frequency, vif)
from .training import (Adam, Checkpoint, Pipeline, TrainConfig, evaluate_pipeline,
                       lr_at, run_ablation, train, train_stage1, train_stage2)
from .datasets import generate_dataset, load_dataset, save_dataset, verify_dataset

__version__ = "0.1.0"
