"""Clinical report information extraction: entities, modalities, relations."""
__version__ = "0.1.0"

from .annotation_io import (  # noqa: E402
    Corpus, Document, Entity, Relation, Token, corpus_stats, parse_corpus, parse_report,
    read_corpus, serialize_corpus, serialize_report, strip_annotations, write_corpus,
)
from .schema import DEFAULT_SCHEMA, Schema, load_schema  # noqa: E402
