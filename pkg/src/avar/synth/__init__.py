from .clients import HttpClient, MockClient, make_client
from .pipeline import (
    DEFAULT_ANCHOR_LEXICON,
    PipelineConfig,
    SynthesisRecord,
    count_anchors,
    describe,
    insert_anchors_rule,
    integrate_anchors,
    load_templates,
    read_inputs,
    reason,
    run_pipeline,
)

__all__ = [
    "DEFAULT_ANCHOR_LEXICON",
    "HttpClient",
    "MockClient",
    "PipelineConfig",
    "SynthesisRecord",
    "count_anchors",
    "describe",
    "insert_anchors_rule",
    "integrate_anchors",
    "load_templates",
    "make_client",
    "read_inputs",
    "reason",
    "run_pipeline",
]
