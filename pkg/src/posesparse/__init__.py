"""Pose-conditioned sparse attention, region losses and toy DMD distillation."""

__version__ = "0.1.0"

from .alignment import GlobalMaskConfig, RigidTransform, SimilarityMatrix, rigid_align, select_topk, similarity_matrix
from .attention import AttentionInputs, AttentionOutput, block_sparse_attention, dense_masked_attention
from .mask_builder import AttentionMask, BlockMode, BlockSparseLayout, build_mask, pool_to_blocks, sparsity_report
from .pose_io import FilterPolicy, PoseFrame, PoseSequence, filter_frames, load_pose_sequence, save_pose_sequence
from .regions import RegionLabel, RegionLabeling, TokenGrid, label_sequence, label_tokens, mls_rigid_warp

__all__ = [
    "AttentionInputs", "AttentionMask", "AttentionOutput", "BlockMode", "BlockSparseLayout", "FilterPolicy",
    "GlobalMaskConfig", "PoseFrame", "PoseSequence", "RegionLabel", "RegionLabeling", "RigidTransform",
    "SimilarityMatrix", "TokenGrid", "block_sparse_attention", "build_mask", "dense_masked_attention",
    "filter_frames", "label_sequence", "label_tokens", "load_pose_sequence", "mls_rigid_warp", "pool_to_blocks",
    "rigid_align", "save_pose_sequence", "select_topk", "similarity_matrix", "sparsity_report",
]
