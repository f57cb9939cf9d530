"""Few-shot volumetric segmentation of tubular structures.

Prototype-based segmentation: a compact 3D encoder-decoder embeds image
patches, class prototypes are pooled from support masks, and query voxels
are classified by cosine similarity to the prototypes.
"""

__version__ = "0.1.0"
