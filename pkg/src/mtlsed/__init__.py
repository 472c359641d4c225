"""Desk-scale sound event detection with an auxiliary coarse-class branch.

Subpackages cover the full loop: synthetic soundscape generation (audiogen),
log-mel features (frontend), a two-branch frequency-dynamic CRNN (model),
joint training with pseudo-labels (training), median-filter smoothing and
event decoding (postprocess), polyphonic detection scores (evaluation), and
sweep orchestration (experiments).
"""

__version__ = "0.1.0"

from .taxonomy import (  # noqa: F401
    ACC_CLASSES,
    EVENT_CLASSES,
    AccLabel,
    EventLabel,
    TaxonomyMap,
    proposed_map,
    project_labels,
    randomized_map,
    resolve_taxonomy,
)
