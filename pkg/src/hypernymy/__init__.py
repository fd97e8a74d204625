"""Measure how well image generators understand WordNet hypernymy.

Generated images are classified by an external ImageNet classifier; this
package locates those predictions in the hypernym hierarchy and scores them
with the In-Subtree Probability (ISP) and the Subtree Coverage Score (SCS).
"""

import json
from importlib import resources

from .hierarchy import HierarchyGraph, load_hierarchy, prompt_manifest
from .ingest import PredictionSet, load_predictions
from .metrics import MetricReport, evaluate, isp, scs, scs_normalizer

__version__ = "0.1.0"



def load_schema(name: str) -> dict:
    """JSON Schema for an output format, e.g. ``load_schema("report")``."""
    text = resources.files(__name__).joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


__all__ = [
    "HierarchyGraph",
    "MetricReport",
    "PredictionSet",
    "evaluate",
    "isp",
    "load_hierarchy",
    "load_predictions",
    "load_schema",
    "prompt_manifest",
    "scs",
    "scs_normalizer",
]
