"""Predicted-to-gold slot matching and adjusted precision/recall metrics.

Slots are compared as sets of (dialogue, turn, value) fills; a predicted
slot maps to the gold slot with the highest exact-match similarity, subject
to a 0.5 threshold (boundary inclusive). Redundant predictions onto one
gold slot count as precision errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .core import Dialogue, DialogueState, SlotKey, SlotSchema, canonical_slot_key
from .seqio import CorpusFile, StateMode

__all__ = [
    "ValuedSlot",
    "SlotMapping",
    "PRF",
    "MetricReport",
    "EmptyPredictedSlot",
    "InvalidGold",
    "UnknownScenario",
    "IncompleteMapping",
    "MATCH_THRESHOLD",
    "similarity_exact",
    "match_slots",
    "slot_prf",
    "value_prf",
    "collect_valued_slots",
    "gold_valued_slots",
    "evaluate_run",
    "mean_reports",
    "load_human_mapping",
    "mapping_agreement",
]

MATCH_THRESHOLD = 0.5

Fill = Tuple[str, int, str]  # (dialogue_id, turn_index, value)


class EmptyPredictedSlot(ValueError):
    """Similarity is undefined for a predicted slot with no fills."""


class InvalidGold(ValueError):
    """The gold side is empty or unusable."""


class UnknownScenario(KeyError):
    """Predictions reference a dialogue/scenario absent from the gold corpus."""


class IncompleteMapping(ValueError):
    """A human mapping file lacks a decision for some predicted slot."""


@dataclass(frozen=True)
class ValuedSlot:
    """A slot identity with the set of contexts and values that filled it.

    Values are stored verbatim and compared caselessly.
    """

    key: SlotKey
    fills: frozenset = frozenset()  # of Fill

    def __post_init__(self) -> None:
        object.__setattr__(self, "fills", frozenset(self.fills))

    def folded_fills(self) -> frozenset:
        return frozenset((d, t, v.casefold()) for d, t, v in self.fills)


def _overlap(p: ValuedSlot, g: ValuedSlot) -> int:
    return len(p.folded_fills() & g.folded_fills())


def similarity_exact(p: ValuedSlot, g: ValuedSlot) -> float:
    """Fraction of p's fills exactly (caselessly) present in g at the same
    (dialogue, turn) context."""
    if not p.fills:
        raise EmptyPredictedSlot(f"predicted slot {p.key} has no fills")
    return _overlap(p, g) / len(p.fills)


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class SlotMapping:
    """An assignment of predicted slot keys to gold slot keys.

    Each predicted key appears at most once; several predicted keys may map
    to one gold key (the slot precision formula penalizes this). The slot
    index retains the underlying fills for value metrics and is excluded
    from equality.
    """

    pairs: Tuple[Tuple[SlotKey, SlotKey], ...] = ()
    unmatched_predicted: frozenset = frozenset()
    similarity_threshold: float = MATCH_THRESHOLD
    slot_index: Mapping[str, Mapping[SlotKey, ValuedSlot]] = field(
        default_factory=dict, compare=False
    )

    def __post_init__(self) -> None:
        predicted = [p for p, _ in self.pairs]
        if len(predicted) != len(set(predicted)):
            raise ValueError("a predicted key appears in multiple mapping pairs")

    def predicted_keys(self) -> frozenset:
        return frozenset(p for p, _ in self.pairs) | self.unmatched_predicted

    def decision(self, predicted: SlotKey) -> Optional[SlotKey]:
        for p, g in self.pairs:
            if p == predicted:
                return g
        return None

    def matched_valued_pairs(self) -> List[Tuple[ValuedSlot, ValuedSlot]]:
        pred_index = self.slot_index.get("predicted", {})
        gold_index = self.slot_index.get("gold", {})
        return [(pred_index[p], gold_index[g]) for p, g in self.pairs]


def match_slots(
    P: Sequence[ValuedSlot],
    G: Sequence[ValuedSlot],
    threshold: float = MATCH_THRESHOLD,
    similarity=similarity_exact,
) -> SlotMapping:
    """Map each predicted slot to its argmax-similarity gold slot.

    A predicted slot is unmatched when its best similarity falls below the
    threshold (strictly; similarity equal to the threshold matches). Argmax
    ties break by larger fill overlap, then lexicographic gold key.
    """
    gold_keys = [g.key for g in G]
    if len(gold_keys) != len(set(gold_keys)):
        raise InvalidGold("gold slot keys must be unique")
    pairs: List[Tuple[SlotKey, SlotKey]] = []
    unmatched: List[SlotKey] = []
    for p in sorted(P, key=lambda s: s.key):
        if not p.fills or not G:
            unmatched.append(p.key)
            continue
        best = max(G, key=lambda g: (similarity(p, g), _overlap(p, g)), default=None)
        # deterministic tie-break: among equal (similarity, overlap), smallest key
        best_score = (similarity(p, best), _overlap(p, best))
        candidates = [g for g in G if (similarity(p, g), _overlap(p, g)) == best_score]
        best = min(candidates, key=lambda g: g.key)
        if best_score[0] < threshold:
            unmatched.append(p.key)
        else:
            pairs.append((p.key, best.key))
    return SlotMapping(
        tuple(pairs),
        frozenset(unmatched),
        threshold,
        {"predicted": {s.key: s for s in P}, "gold": {s.key: s for s in G}},
    )


def slot_prf(mapping: SlotMapping, P: Sequence[ValuedSlot], G: Sequence[ValuedSlot]) -> PRF:
    """Slot precision/recall: distinct mapped gold slots over |P| and |G|."""
    if len(G) == 0:
        raise InvalidGold("gold slot set is empty")
    matched_gold = {g for _, g in mapping.pairs}
    if len(P) == 0:
        return PRF(0.0, 0.0, 0.0, degenerate=True)
    precision = len(matched_gold) / len(P)
    recall = len(matched_gold) / len(G)
    return PRF(precision, recall, _f1(precision, recall))


def value_prf(mapping: SlotMapping) -> PRF:
    """Value precision/recall summed over matched pairs only."""
    matched = mapping.matched_valued_pairs()
    if not matched:
        return PRF(0.0, 0.0, 0.0, degenerate=True)
    overlap = sum(_overlap(p, g) for p, g in matched)
    total_p = sum(len(p.fills) for p, _ in matched)
    total_g = sum(len(g.fills) for _, g in matched)
    precision = overlap / total_p if total_p else 0.0
    recall = overlap / total_g if total_g else 0.0
    return PRF(precision, recall, _f1(precision, recall))


def collect_valued_slots(
    state_log: Iterable,
    schema: Optional[SlotSchema] = None,
    mode: StateMode = StateMode.STATE,
) -> List[ValuedSlot]:
    """Group a run's per-turn states into per-slot fill sets.

    Entries are (dialogue_id, turn_index, state) triples or objects with
    those attributes. When a schema is given, fills on keys outside it are
    ignored.
    """
    fills: Dict[SlotKey, set] = {}
    for entry in state_log:
        if isinstance(entry, tuple):
            dialogue_id, turn_index, state = entry
        else:
            dialogue_id, turn_index, state = entry.dialogue_id, entry.turn_index, entry.state
        for key, value in state.triples:
            if schema is not None and key not in schema:
                continue
            fills.setdefault(key, set()).add((dialogue_id, turn_index, value))
    return [ValuedSlot(key, frozenset(events)) for key, events in sorted(fills.items())]


def _gold_state_stream(dialogue: Dialogue, mode: StateMode):
    """Yield (turn_index, state) pairs for the gold side in the given mode."""
    user_turns = [i for i in dialogue.user_turn_indices() if dialogue.turns[i].gold_state]
    if mode is StateMode.FINAL:
        indices = dialogue.user_turn_indices()
        if indices and dialogue.turns[indices[-1]].gold_state is not None:
            yield indices[-1], dialogue.turns[indices[-1]].gold_state
        return
    prev = DialogueState()
    for i in dialogue.user_turn_indices():
        state = dialogue.turns[i].gold_state
        if state is None:
            continue
        if mode is StateMode.UPDATE:
            delta = frozenset(
                (k, v) for k, v in state.triples if prev.value_of(k) != v
            )
            yield i, DialogueState(delta)
        else:
            yield i, state
        prev = state


def gold_valued_slots(
    dialogues: Sequence[Dialogue], mode: StateMode, schema: Optional[SlotSchema] = None
) -> List[ValuedSlot]:
    entries = []
    for dialogue in dialogues:
        for turn_index, state in _gold_state_stream(dialogue, mode):
            entries.append((dialogue.id, turn_index, state))
    return collect_valued_slots(entries, schema, mode)


@dataclass(frozen=True)
class MetricReport:
    """The six metrics, overall (macro across scenarios) and per scenario."""

    slot_p: float
    slot_r: float
    slot_f1: float
    value_p: float
    value_r: float
    value_f1: float
    per_scenario: Mapping[str, Tuple[float, float, float, float, float, float]] = field(
        default_factory=dict
    )
    replicate_mean: bool = False

    def numbers(self) -> Tuple[float, ...]:
        return (self.slot_p, self.slot_r, self.slot_f1, self.value_p, self.value_r, self.value_f1)

    def to_obj(self) -> dict:
        return {
            "slot": {"precision": self.slot_p, "recall": self.slot_r, "f1": self.slot_f1},
            "value": {"precision": self.value_p, "recall": self.value_r, "f1": self.value_f1},
            "per_scenario": {
                sid: {
                    "slot": {"precision": n[0], "recall": n[1], "f1": n[2]},
                    "value": {"precision": n[3], "recall": n[4], "f1": n[5]},
                }
                for sid, n in sorted(self.per_scenario.items())
            },
            "replicate_mean": self.replicate_mean,
        }

    def render_table(self) -> str:
        header = f"{'scenario':<24}{'Slot P':>8}{'Slot R':>8}{'Slot F1':>9}{'Val P':>8}{'Val R':>8}{'Val F1':>9}"
        rows = [header, "-" * len(header)]
        for sid, n in sorted(self.per_scenario.items()):
            rows.append(
                f"{sid:<24}{n[0]:>8.3f}{n[1]:>8.3f}{n[2]:>9.3f}{n[3]:>8.3f}{n[4]:>8.3f}{n[5]:>9.3f}"
            )
        n = self.numbers()
        rows.append(
            f"{'MEAN':<24}{n[0]:>8.3f}{n[1]:>8.3f}{n[2]:>9.3f}{n[3]:>8.3f}{n[4]:>8.3f}{n[5]:>9.3f}"
        )
        return "\n".join(rows)


def evaluate_run(
    state_log: Iterable,
    gold_corpus: CorpusFile,
    mode: StateMode,
    predicted_schema: Optional[SlotSchema] = None,
    threshold: float = MATCH_THRESHOLD,
) -> MetricReport:
    """Score a run's state log against a gold corpus, macro-averaged across
    scenarios."""
    if gold_corpus.gold_schema is None:
        raise InvalidGold("gold corpus has no gold schema")
    dialogue_scenario = {d.id: d.scenario_id for d in gold_corpus.dialogues}
    entries_by_scenario: Dict[str, list] = {d.scenario_id: [] for d in gold_corpus.dialogues}
    for entry in state_log:
        dialogue_id = entry[0] if isinstance(entry, tuple) else entry.dialogue_id
        if dialogue_id not in dialogue_scenario:
            raise UnknownScenario(f"dialogue {dialogue_id!r} not present in gold corpus")
        entries_by_scenario[dialogue_scenario[dialogue_id]].append(entry)

    per_scenario = {}
    for scenario_id, entries in sorted(entries_by_scenario.items()):
        dialogues = [d for d in gold_corpus.dialogues if d.scenario_id == scenario_id]
        G = gold_valued_slots(dialogues, mode)
        if not G:
            raise InvalidGold(f"scenario {scenario_id!r} has no gold fills")
        P = collect_valued_slots(entries, predicted_schema, mode)
        mapping = match_slots(P, G, threshold)
        s = slot_prf(mapping, P, G)
        v = value_prf(mapping)
        per_scenario[scenario_id] = (
            s.precision, s.recall, s.f1, v.precision, v.recall, v.f1,
        )
    if not per_scenario:
        raise InvalidGold("gold corpus contains no dialogues")
    means = [sum(n[i] for n in per_scenario.values()) / len(per_scenario) for i in range(6)]
    return MetricReport(*means, per_scenario=per_scenario)


def mean_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Element-wise mean across replicate reports."""
    if not reports:
        raise ValueError("no reports to average")
    means = [sum(r.numbers()[i] for r in reports) / len(reports) for i in range(6)]
    return MetricReport(*means, per_scenario={}, replicate_mean=True)


def load_human_mapping(path) -> SlotMapping:
    """Load a human decisions file: each predicted slot maps to a gold slot
    or an explicit null for "no match"."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    pairs = []
    unmatched = []
    for decision in obj["decisions"]:
        predicted = canonical_slot_key(
            decision["predicted"]["domain"], decision["predicted"]["name"]
        )
        if decision.get("gold") is None:
            unmatched.append(predicted)
        else:
            gold = canonical_slot_key(decision["gold"]["domain"], decision["gold"]["name"])
            pairs.append((predicted, gold))
    return SlotMapping(tuple(pairs), frozenset(unmatched))


def mapping_agreement(auto: SlotMapping, human: SlotMapping) -> float:
    """Fraction of predicted slots whose auto decision matches the human's.

    The human mapping must cover every predicted key of the auto mapping;
    an empty predicted set yields agreement 1.0.
    """
    predicted = auto.predicted_keys()
    if not predicted:
        return 1.0
    covered = human.predicted_keys()
    missing = predicted - covered
    if missing:
        raise IncompleteMapping(
            f"human mapping lacks decisions for: {sorted(map(str, missing))}"
        )
    agree = sum(1 for key in predicted if auto.decision(key) == human.decision(key))
    return agree / len(predicted)
