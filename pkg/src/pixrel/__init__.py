"""Pixel-wise attribution, boundary evaluation and perturbation analysis for small CNNs."""

__version__ = "0.1.0"

from .attribution import (
    AggregationMode,
    Deconvolution,
    Gradient,
    Heatmap,
    HeatmapRecipe,
    LrpAlphaBeta,
    LrpEpsilon,
    RelevanceMap,
    aggregate_subpixels,
    attribute,
    deconv_relevance,
    gradient_relevance,
    lrp_relevance,
    rectify,
)
from .evaluation import (
    BoundaryMap,
    PrCurve,
    average_precision,
    evaluate_dataset,
    match_counts,
    max_fscore,
    pr_curve,
    thicken,
)
from .network import (
    ActivationTrace,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    NetworkModel,
    ReLU,
    forward,
    input_gradient,
    predict,
    validate_model,
)
from .perturbation import (
    FixedValue,
    PerturbationSpec,
    PixelSet,
    Uniform01,
    expected_decline,
    gt_vs_method_study,
    perturb_once,
    top_k_pixels,
)
