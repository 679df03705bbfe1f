"""Attention-augmented VGG classifier for leaf-disease images, with a
from-scratch differentiable layer library, training loop, evaluation
metrics, and an explainability suite (attention maps, Grad-CAM variants,
layer-wise relevance propagation, t-SNE feature embeddings)."""

from . import (cbam, cli, datapipe, embed, errors, explain, imaging, metrics,
               model, synth, tensor, trainer)

__version__ = "0.1.0"

__all__ = ["cbam", "cli", "datapipe", "embed", "errors", "explain", "imaging",
           "metrics", "model", "synth", "tensor", "trainer", "__version__"]
