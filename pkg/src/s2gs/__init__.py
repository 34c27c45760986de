"""Strictly causal streaming reconstruction of a semantic gaussian scene.

Frames arrive one at a time; all cross-frame information lives in a
persistent state (encoder KV cache, accumulated gaussian scene, instance
memory bank), so history is never reprocessed. A decoupled per-frame
semantic stream supplies masks, classes and identity embeddings that are
lifted onto the 3D gaussians; a benchmark harness contrasts per-frame cost
against an offline re-encode-everything baseline.
"""

__version__ = "0.1.0"
