"""Schema refinement: confidence-window filtering, FIFO/priority eviction,
generative schema revision, and the noise generator for revision training.

All operations are pure functions of their inputs (plus an explicit seed);
stateful refiner wrappers own their statistics within a single run.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple

from .backend import Backend, GenerationRequest
from .core import GOLD, DialogueState, SlotDef, SlotKey, SlotSchema, schema_update
from .seqio import (
    DEFAULT_PACK,
    CorpusFile,
    MissingGoldError,
    MissingTypesHeader,
    PromptPack,
    parse_schema_block,
    render_revision_prompt,
    render_schema_block,
)

__all__ = [
    "SlotRecord",
    "SlotStats",
    "FilterConfig",
    "NoiseStrategy",
    "NOISE_VARIANTS",
    "record_state",
    "confidence_filter",
    "fifo_filter",
    "priority_filter",
    "make_revision_example",
    "build_revision_pairs",
    "revise_schema",
    "Refiner",
    "SlotConfidenceRefiner",
    "FifoRefiner",
    "PriorityRefiner",
    "RevisionRefiner",
    "make_refiner",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlotRecord:
    """Fill history of one slot, in dialogue indices (ascending, deduped)."""

    fill_events: Tuple[int, ...]
    discovered_at: int

    @property
    def global_count(self) -> int:
        return len(self.fill_events)

    @property
    def last_filled(self) -> int:
        return self.fill_events[-1] if self.fill_events else -1


@dataclass(frozen=True)
class SlotStats:
    """Per-slot fill statistics across a dialogue stream."""

    records: Mapping[SlotKey, SlotRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", MappingProxyType(dict(self.records)))

    def get(self, key: SlotKey) -> Optional[SlotRecord]:
        return self.records.get(key)


def record_state(stats: SlotStats, state: DialogueState, dialogue_index: int) -> SlotStats:
    """Count one fill event per valued slot, at most once per dialogue."""
    if not state.triples:
        return stats
    records: Dict[SlotKey, SlotRecord] = dict(stats.records)
    for key in state.keys():
        rec = records.get(key)
        if rec is None:
            records[key] = SlotRecord((dialogue_index,), dialogue_index)
        elif rec.last_filled != dialogue_index:
            records[key] = SlotRecord(rec.fill_events + (dialogue_index,), rec.discovered_at)
    return SlotStats(records)


@dataclass(frozen=True)
class FilterConfig:
    window_w: int = 10
    threshold_tau: int = 1
    cap: int = 100

    def __post_init__(self) -> None:
        if self.window_w < 1 or self.threshold_tau < 1 or self.cap < 1:
            raise ValueError("window_w, threshold_tau, and cap must all be >= 1")


def _eviction_order(schema: SlotSchema, stats: SlotStats, primary) -> List[SlotDef]:
    def sort_key(slot: SlotDef):
        rec = stats.get(slot.key)
        discovered = rec.discovered_at if rec else -1
        return (primary(rec), discovered, slot.key)

    return sorted(schema, key=sort_key)


def confidence_filter(
    schema: SlotSchema, stats: SlotStats, cfg: FilterConfig, current_dialogue: int
) -> SlotSchema:
    """Drop slots with fewer than tau fills in the last w dialogues.

    Runs at a dialogue boundary after processing ``current_dialogue``. Slots
    younger than w dialogues keep a grace period, and gold-seeded slots are
    never evicted. The counted window is (current - w, current].
    """
    w, tau = cfg.window_w, cfg.threshold_tau
    doomed = []
    for slot in schema:
        if slot.discovered_at == GOLD:
            continue
        rec = stats.get(slot.key)
        discovered = rec.discovered_at if rec else current_dialogue
        if current_dialogue - discovered < w:
            continue
        fills = rec.fill_events if rec else ()
        recent = sum(1 for d in fills if current_dialogue - w < d <= current_dialogue)
        if recent < tau:
            doomed.append(slot.key)
    return schema.without_keys(doomed)


def fifo_filter(schema: SlotSchema, stats: SlotStats, cfg: FilterConfig) -> SlotSchema:
    """Evict least-recently-filled slots once the schema exceeds the cap."""
    if len(schema) <= cfg.cap:
        return schema
    order = _eviction_order(schema, stats, lambda rec: rec.last_filled if rec else -1)
    doomed = [slot.key for slot in order[: len(schema) - cfg.cap]]
    return schema.without_keys(doomed)


def priority_filter(schema: SlotSchema, stats: SlotStats, cfg: FilterConfig) -> SlotSchema:
    """Evict least-frequently-updated slots when the schema reaches the cap.

    Shrinks to cap - 1 to leave room for the next discovery.
    """
    if len(schema) < cfg.cap:
        return schema
    order = _eviction_order(schema, stats, lambda rec: rec.global_count if rec else 0)
    doomed = [slot.key for slot in order[: len(schema) - (cfg.cap - 1)]]
    return schema.without_keys(doomed)


NOISE_VARIANTS = ("no_noise", "add_noisy_subset", "mix_subsets")


@dataclass(frozen=True)
class NoiseStrategy:
    variant: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in NOISE_VARIANTS:
            raise ValueError(f"unknown noise variant: {self.variant!r}")

    @classmethod
    def draw(cls, rng: random.Random) -> "NoiseStrategy":
        """Draw a variant uniformly; the example seed comes from the same rng."""
        return cls(rng.choice(NOISE_VARIANTS), rng.randrange(2**31))


def _bernoulli_subset(slots, rng: random.Random) -> List[SlotDef]:
    # independent p=0.5 per element
    return [slot for slot in slots if rng.random() < 0.5]


def make_revision_example(
    gold: SlotSchema, noisy: SlotSchema, strategy: NoiseStrategy
) -> Tuple[SlotSchema, SlotSchema]:
    """Build one (input, target) schema pair for revision training.

    The target is always the gold schema; the input is gold corrupted per
    the strategy, with key collisions resolved in gold's favor and the final
    order shuffled by the strategy's seed.
    """
    if len(gold) == 0:
        raise ValueError("gold schema must be nonempty")
    rng = random.Random(strategy.seed)
    if strategy.variant == "no_noise":
        pool = list(gold)
    elif strategy.variant == "add_noisy_subset":
        pool = list(gold) + _bernoulli_subset(noisy, rng)
    else:  # mix_subsets
        pool = _bernoulli_subset(gold, rng) + _bernoulli_subset(noisy, rng)
    merged: Dict[SlotKey, SlotDef] = {}
    for slot in pool:
        merged.setdefault(slot.key, slot)
    slots = list(merged.values())
    rng.shuffle(slots)
    return SlotSchema(tuple(slots)), gold


def revise_schema(
    schema: SlotSchema,
    backend: Backend,
    pack: PromptPack = DEFAULT_PACK,
    position=None,
    max_output: int = 2048,
) -> SlotSchema:
    """Ask the backend to rewrite the schema; parse the reply as the new one.

    Surviving slots (matched canonically) keep their original discovery
    position; new or renamed slots get ``position``. An unparseable reply
    leaves the schema unchanged with a logged warning.
    """
    prompt = render_revision_prompt(schema, pack)
    response = backend.generate(GenerationRequest(prompt, max_output=max_output))
    try:
        revised, warnings = parse_schema_block(response, pack)
    except MissingTypesHeader:
        log.warning("revision reply had no schema block; schema unchanged")
        return schema
    for warning in warnings:
        log.warning("revision parse: %s", warning)
    slots = []
    for slot in revised:
        original = schema.get(slot.key)
        provenance = original.discovered_at if original else (position if position is not None else GOLD)
        slots.append(SlotDef(slot.key, slot.description, provenance))
    if [(s.key, s.description) for s in slots] == [(s.key, s.description) for s in schema]:
        return schema
    return SlotSchema(tuple(slots), schema.version + 1)


def build_revision_pairs(
    corpus: CorpusFile,
    noisy_states,
    seed: int,
    pack: PromptPack = DEFAULT_PACK,
) -> List[Tuple[str, str]]:
    """Build revision (prompt, target) pairs from a gold corpus and a prior
    run's noisy state log.

    Noisy states are aligned to gold positions by (dialogue id, turn index)
    and folded into a running noisy schema; for each user turn a noise
    strategy is drawn with the run seed and applied to the gold schema as
    introduced so far. Positions with an empty gold schema are skipped.
    """
    if corpus.gold_schema is None:
        raise MissingGoldError("corpus has no gold schema")
    noisy_by_position = {}
    for entry in noisy_states:
        if isinstance(entry, tuple):
            dialogue_id, turn_index, state = entry
        else:
            dialogue_id, turn_index, state = entry.dialogue_id, entry.turn_index, entry.state
        noisy_by_position[(dialogue_id, turn_index)] = state

    rng = random.Random(seed)
    noisy_schema = SlotSchema()
    introduced: set = set()
    pairs: List[Tuple[str, str]] = []
    for dialogue in corpus.dialogues:
        for turn_index in dialogue.user_turn_indices():
            gold_state = dialogue.turns[turn_index].gold_state
            if gold_state is not None:
                introduced |= gold_state.keys()
            noisy_state = noisy_by_position.get((dialogue.id, turn_index))
            if noisy_state is not None:
                noisy_schema = schema_update(noisy_schema, noisy_state)
            gold_t = corpus.gold_schema.restricted_to(introduced)
            if len(gold_t) == 0:
                continue
            strategy = NoiseStrategy.draw(rng)
            noised, target = make_revision_example(gold_t, noisy_schema, strategy)
            pairs.append(
                (render_revision_prompt(noised, pack), render_schema_block(target, pack))
            )
    return pairs


# ---------------------------------------------------------------------------
# Stateful refiner wrappers for the induction engine
# ---------------------------------------------------------------------------


class Refiner:
    """Per-run refinement strategy: observes states, edits the schema at
    dialogue boundaries."""

    name = "none"

    def observe_state(self, state: DialogueState, dialogue_index: int) -> None:
        pass

    def end_dialogue(self, schema: SlotSchema, dialogue_index: int) -> SlotSchema:
        return schema

    def params(self) -> dict:
        return {}


class _StatsRefiner(Refiner):
    def __init__(self, cfg: FilterConfig):
        self.cfg = cfg
        self.stats = SlotStats()

    def observe_state(self, state: DialogueState, dialogue_index: int) -> None:
        self.stats = record_state(self.stats, state, dialogue_index)


class SlotConfidenceRefiner(_StatsRefiner):
    name = "slot-conf"

    def end_dialogue(self, schema: SlotSchema, dialogue_index: int) -> SlotSchema:
        return confidence_filter(schema, self.stats, self.cfg, dialogue_index)

    def params(self) -> dict:
        return {"window_w": self.cfg.window_w, "threshold_tau": self.cfg.threshold_tau}


class FifoRefiner(_StatsRefiner):
    name = "fifo"

    def end_dialogue(self, schema: SlotSchema, dialogue_index: int) -> SlotSchema:
        return fifo_filter(schema, self.stats, self.cfg)

    def params(self) -> dict:
        return {"cap": self.cfg.cap}


class PriorityRefiner(_StatsRefiner):
    name = "priority"

    def end_dialogue(self, schema: SlotSchema, dialogue_index: int) -> SlotSchema:
        return priority_filter(schema, self.stats, self.cfg)

    def params(self) -> dict:
        return {"cap": self.cfg.cap}


class RevisionRefiner(Refiner):
    name = "revision"

    def __init__(self, backend: Backend, pack: PromptPack = DEFAULT_PACK):
        self.backend = backend
        self.pack = pack

    def end_dialogue(self, schema: SlotSchema, dialogue_index: int) -> SlotSchema:
        return revise_schema(schema, self.backend, self.pack, position=(dialogue_index, -1))


def make_refiner(
    name: Optional[str],
    cfg: Optional[FilterConfig] = None,
    backend: Optional[Backend] = None,
    pack: PromptPack = DEFAULT_PACK,
) -> Optional[Refiner]:
    if name in (None, "none"):
        return None
    cfg = cfg or FilterConfig()
    if name == "slot-conf":
        return SlotConfidenceRefiner(cfg)
    if name == "fifo":
        return FifoRefiner(cfg)
    if name == "priority":
        return PriorityRefiner(cfg)
    if name == "revision":
        if backend is None:
            raise ValueError("revision refiner requires a backend")
        return RevisionRefiner(backend, pack)
    raise ValueError(f"unknown refiner: {name!r}")
