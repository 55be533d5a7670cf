"""Position-aware multiple-instance learning on bags of located features.

Bags of patch feature vectors with 2D grid coordinates are encoded by a
rotary-position transformer layer whose masked self-attention comes in an
exact quadratic flavor and an exact streaming (bounded-scratch) flavor,
then pooled by attention-based MIL heads into a bag-level prediction.
Everything runs on numpy with hand-written gradients.
"""

from .attention import (AttentionWorkspace, MhsaParams, attend_naive,
                        attend_naive_bwd, attend_naive_fwd, attend_streaming,
                        init_mhsa_params, mhsa_bwd, mhsa_forward, mhsa_fwd)
from .data import (ManifestEntry, SynthConfig, load_bag, load_dataset,
                   load_manifest, load_model, save_bag, save_dataset,
                   save_model, synth_generate, write_manifest, write_results)
from .encoder import (EncoderParams, encoder_param_count, init_encoder_params,
                      roformer_layer_bwd, roformer_layer_forward,
                      roformer_layer_fwd)
from .errors import (ConfigurationError, DataFormatError, DegenerateRowWarning,
                     DimensionError, EmptyAttentionContext, EmptyBagError,
                     NumericFailure, RopemilError, ValidationError)
from .grid import GridConfig, PatchBag, build_bag, pad_bags, quantize_coords
from .mil import (ARM_PRESETS, AbmilParams, DsmilParams, ModelConfig,
                  ModelParams, PoolOutput, abmil_pool, abmil_pool_bwd,
                  abmil_pool_fwd, arm_config, dsmil_pool, dsmil_pool_bwd,
                  dsmil_pool_fwd, init_model_params, model_bwd, model_forward,
                  model_fwd, model_param_count)
from .numkernel import (cross_entropy_loss, finite_difference_grad, gelu_fwd,
                        layer_norm, masked_row_softmax, matmul)
from .posenc import RopeTable, rope_1d, rope_2d, rope_2d_bwd, sincos_abs_2d
from .training import (AdamState, FoldRecord, TrainConfig, TrainRun, adam_step,
                       ap_macro, auroc_macro, average_precision, evaluate,
                       init_adam_state, stratified_kfold, train)

__version__ = "0.1.0"

__all__ = [
    "ARM_PRESETS", "AbmilParams", "AdamState", "AttentionWorkspace",
    "ConfigurationError", "DataFormatError", "DegenerateRowWarning",
    "DimensionError", "DsmilParams", "EmptyAttentionContext", "EmptyBagError",
    "EncoderParams", "FoldRecord", "GridConfig", "ManifestEntry",
    "MhsaParams", "ModelConfig", "ModelParams", "NumericFailure", "PatchBag",
    "PoolOutput", "RopeTable", "RopemilError", "SynthConfig", "TrainConfig",
    "TrainRun", "ValidationError", "abmil_pool", "abmil_pool_bwd",
    "abmil_pool_fwd", "adam_step", "ap_macro", "arm_config",
    "attend_naive", "attend_naive_bwd", "attend_naive_fwd",
    "attend_streaming", "auroc_macro", "average_precision", "build_bag",
    "cross_entropy_loss", "dsmil_pool", "dsmil_pool_bwd", "dsmil_pool_fwd",
    "encoder_param_count", "evaluate", "finite_difference_grad", "gelu_fwd",
    "init_adam_state", "init_encoder_params", "init_mhsa_params",
    "init_model_params", "layer_norm", "load_bag", "load_dataset",
    "load_manifest", "load_model", "masked_row_softmax", "matmul",
    "mhsa_bwd", "mhsa_forward", "mhsa_fwd", "model_bwd", "model_forward",
    "model_fwd", "model_param_count", "pad_bags", "quantize_coords",
    "rope_1d", "rope_2d", "rope_2d_bwd", "roformer_layer_bwd",
    "roformer_layer_forward", "roformer_layer_fwd", "save_bag",
    "save_dataset", "save_model", "sincos_abs_2d", "stratified_kfold",
    "synth_generate", "train", "write_manifest", "write_results",
]
