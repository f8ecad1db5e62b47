"""Desk-scale 3D brain-tumor segmentation pipeline.

Self-contained: volume containers and phantoms (volio), intensity
standardization and cropping (preprocess), training augmentations
(augment), a minimal reverse-mode tensor engine (tensornet), the
deeply supervised 3D U-Net and Dice losses (unet3d), both training
pipelines (train), TTA-ensembled inference and labelmap merging
(infer), and the challenge metric suite (metrics).
"""

__version__ = "0.1.0"
