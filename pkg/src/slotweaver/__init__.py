"""Streaming slot-schema induction, dialogue simulation, and evaluation."""

from .core import (
    Dialogue,
    DialogueState,
    SlotDef,
    SlotKey,
    SlotSchema,
    Turn,
    canonical_slot_key,
    schema_update,
)
from .seqio import CorpusFile, StateMode, load_corpus, save_corpus

__version__ = "0.1.0"

__all__ = [
    "Dialogue",
    "DialogueState",
    "SlotDef",
    "SlotKey",
    "SlotSchema",
    "Turn",
    "canonical_slot_key",
    "schema_update",
    "CorpusFile",
    "StateMode",
    "load_corpus",
    "save_corpus",
    "__version__",
]
