"""Quality control and fusion of multi-annotator binary segmentation masks."""

__version__ = "0.1.0"

from .agreement import (  # noqa: E402
    AgreementMatrix,
    AnnotationSet,
    FilterReport,
    dice,
    filter_annotators,
    median_agreement,
    pairwise_matrix,
)
from .consensus import (  # noqa: E402
    ProbabilityMap,
    SemanticSplit,
    disagreement,
    intersection,
    mean_map,
    semantic_split,
    threshold_map,
    union,
)
from .masks import (  # noqa: E402
    RawImage,
    LabelMap,
    binarize,
    connected_components,
    load_raw,
    remove_speckles,
    subtract_background,
)
