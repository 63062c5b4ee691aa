"""spatialground: grounding referring triplets <target, relation, reference>
in RGB-D scenes by combining detector confidences with a geometric relation
classifier, plus the tooling around it (synthetic scenes, auto-labeling,
training, evaluation, CLI, and an HTTP service)."""

from . import autolabel, classifier, dataio, features, geometry, metrics, pipeline, ranking, synthgen
from .errors import PipelineError

__version__ = "0.1.0"

__all__ = [
    "autolabel",
    "classifier",
    "dataio",
    "features",
    "geometry",
    "metrics",
    "pipeline",
    "ranking",
    "synthgen",
    "PipelineError",
    "__version__",
]
