"""CGNet segmentation of tropical cyclones and atmospheric rivers on a small autodiff core."""

__version__ = "0.1.0"

CLASS_NAMES = ("BG", "TC", "AR")
N_CLASSES = 3
