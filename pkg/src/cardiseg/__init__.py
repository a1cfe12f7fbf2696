"""cardiseg: whole-heart segmentation of non-contrast cardiac CT, desk scale.

The package mirrors a full experimental pipeline on synthetic phantoms: a
network is trained on contrast-suppressed volumes whose labels come from
aligned contrast-enhanced scans, then applied to true non-contrast volumes,
with quantitative (Dice, surface distances, volume agreement) and grading
statistics to match.
"""

__version__ = "0.1.0"

from .volumes import (  # noqa: F401
    FULL_HEART_LABELS,
    LabelMap,
    PreprocessSettings,
    STRUCTURE_NAMES,
    Volume,
    normalize,
    preprocess,
    read_labelmap,
    read_volume,
    resample,
    roi_mean,
    smooth_axial,
    write_volume,
)
