"""Volumetric lobe/airway segmentation core.

The heavy lifting lives in the C++ extension module; this package re-exports
its public surface.
"""

from lobeseg._core import (  # noqa: F401
    LobesegError,
    Model,
    apply_disease,
    clip_hu,
    default_phantom_spec,
    dice_loss,
    dice_per_class,
    emphysema_stats,
    generate_phantom,
    gradcheck,
    hard_dice,
    load_model,
    lung_class_names,
    make_dataset,
    preprocess_case,
    read_nifti1,
    read_volume,
    resample,
    resample_labels,
    set_num_threads,
    t_test,
    write_volume,
    zscore,
)

__all__ = [
    "LobesegError",
    "Model",
    "apply_disease",
    "clip_hu",
    "default_phantom_spec",
    "dice_loss",
    "dice_per_class",
    "emphysema_stats",
    "generate_phantom",
    "gradcheck",
    "hard_dice",
    "load_model",
    "lung_class_names",
    "make_dataset",
    "preprocess_case",
    "read_nifti1",
    "read_volume",
    "resample",
    "resample_labels",
    "set_num_threads",
    "t_test",
    "write_volume",
    "zscore",
]

__version__ = "0.1.0"
