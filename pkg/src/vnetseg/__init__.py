"""Volumetric CNN segmentation with a Dice objective.

Lazy attribute access keeps `import vnetseg` cheap; submodules load on
first use.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Volume": "volume",
    "LabelVolume": "volume",
    "SyntheticSpec": "volume",
    "load_volume": "volume",
    "save_volume": "volume",
    "generate_synthetic": "volume",
    "Tensor5": "tensor",
    "Parameter": "tensor",
    "Tape": "tensor",
    "backward": "tensor",
    "NetworkConfig": "network",
    "VNetModel": "network",
    "build": "network",
    "receptive_fields": "network",
    "dice_forward": "losses",
    "dice_backward": "losses",
    "weighted_logistic": "losses",
    "ClassWeights": "losses",
    "AugmentPolicy": "augment",
    "sample_control_grid": "augment",
    "densify": "augment",
    "warp": "augment",
    "histogram_match": "augment",
    "resample": "augment",
    "normalize_zscore": "augment",
    "TrainConfig": "training",
    "TrainRun": "training",
    "lr_schedule": "training",
    "sgd_momentum_step": "training",
    "train": "training",
    "segment": "inference",
    "dice_metric": "inference",
    "hausdorff_mm": "inference",
    "evaluate": "inference",
    "VNetSegmenter": "estimators",
}


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
