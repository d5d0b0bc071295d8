"""Surface vision transformer pipeline: mesh patching, barycentric
resampling, a manual-backprop transformer encoder with masked-patch
pretraining, and attention-rollout visualization."""

__version__ = "0.1.0"

from .mesh import (Icosphere, QuadMesh, TriMesh, build_icosphere,
                   catmull_clark, load_mesh, save_mesh)
from .model import (AttentionStack, SiTConfig, SiTModel, forward, init_model,
                    load_checkpoint, parameter_count, save_checkpoint)
from .patching import (PatchSequence, PatchTable, build_ico_patch_table,
                       build_quad_patch_table, extract_sequence)
from .resample import (FeatureField, ResampleTable, apply_resample,
                       build_resample_table, rotation_table)
from .train import (Dataset, TrainConfig, evaluate, gen_synthetic,
                    pretrain_mpp, train_loop)

__all__ = [
    "Icosphere", "QuadMesh", "TriMesh", "build_icosphere", "catmull_clark",
    "load_mesh", "save_mesh", "AttentionStack", "SiTConfig", "SiTModel",
    "forward", "init_model", "load_checkpoint", "parameter_count",
    "save_checkpoint", "PatchSequence", "PatchTable", "build_ico_patch_table",
    "build_quad_patch_table", "extract_sequence", "FeatureField",
    "ResampleTable", "apply_resample", "build_resample_table",
    "rotation_table", "Dataset", "TrainConfig", "evaluate", "gen_synthetic",
    "pretrain_mpp", "train_loop",
]
