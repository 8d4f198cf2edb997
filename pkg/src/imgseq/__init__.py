"""Multi-image token sequence encoding toolkit.

Modules:
  core        shared types (grids, latent images, token metadata) and RNG
  mrope       three-axis rotary position embedding
  index_embed count-normalized sinusoidal image-index embedding
  assembler   multi-image sequence assembly with separators and positions
  tinymodel   small attention model with hand-derived gradients
  probe       image-identity retrieval task, ablation grid, extrapolation
  cli         command-line entry points
"""

__version__ = "0.1.0"
