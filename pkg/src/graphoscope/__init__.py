"""graphoscope: writer identification/verification embeddings with
saliency explanations and deletion/insertion faithfulness scoring."""

__version__ = "0.1.0"
