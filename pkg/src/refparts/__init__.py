"""3D shape part segmentation learned from language reference games.

A neural listener discriminates a target shape from two distractors given
an utterance; a constrained cross-attention module over super-segments
yields semantic part masks with no segmentation supervision.
"""

from .attention import (
    PartAttention,
    Segmentation,
    aggregate,
    attend_pn_agnostic,
    attend_pn_aware,
    extract_segmentation,
)
from .encoders import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import (
    BundleFormatError,
    DegenerateGeometryError,
    InvalidInputError,
    RefPartsError,
)
from .geometry import (
    PartLabels,
    PointCloud,
    ShapeRecord,
    SuperSegmentSet,
    assign_points_to_segments,
    split_by_granularity,
    subsample_segment,
)
from .language import (
    GameRound,
    PartNameSet,
    Utterance,
    Vocabulary,
    balanced_weights,
    detect_mentioned_part,
    preprocess_utterance,
    split_rounds,
    synthesize_reference_games,
    template_query,
)
from .model import EncodedShape, ListenerModel
from .synthetic import PartCatalog, PartTemplate, default_chair_catalog, generate_synthetic_shapes
from .training import LossConfig, TrainConfig, TrainData, polynomial_lr, train

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
