"""Token-sequence rendering and parsing, corpus file I/O, and training pairs.

The block format puts a typed-slot catalog, the dialogue so far, and an
instruction line into one prompt; model output is parsed back into a
dialogue state with fault tolerance (malformed lines warn, never abort).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from .core import (
    AGENT,
    GOLD,
    USER,
    Dialogue,
    DialogueState,
    InvalidSlotName,
    SlotDef,
    SlotKey,
    SlotSchema,
    Turn,
    canonical_slot_key,
)

__all__ = [
    "StateMode",
    "PromptPack",
    "DEFAULT_PACK",
    "PromptSequence",
    "ParsedPrediction",
    "CorpusFile",
    "MissingValuesHeader",
    "MissingTypesHeader",
    "CorpusFormatError",
    "MissingGoldError",
    "render_schema_block",
    "parse_schema_block",
    "render_state_block",
    "render_prompt",
    "build_prompt_sequence",
    "render_revision_prompt",
    "parse_state_block",
    "load_corpus",
    "save_corpus",
    "corpus_to_obj",
    "corpus_from_obj",
    "schema_to_obj",
    "schema_from_obj",
    "state_to_obj",
    "state_from_obj",
    "canonical_json",
    "build_training_sequences",
    "save_training_pairs",
    "load_training_pairs",
]


class StateMode(enum.Enum):
    """How dialogue states are represented in targets and predictions."""

    UPDATE = "update"
    STATE = "state"
    FINAL = "final"


class MissingValuesHeader(ValueError):
    """Model output contains no values header; caller treats state as empty."""


class MissingTypesHeader(ValueError):
    """A schema block contains no types header."""


class CorpusFormatError(ValueError):
    """A corpus file violates the documented JSON layout."""


class MissingGoldError(ValueError):
    """The corpus lacks gold labels required for the requested operation."""


@dataclass(frozen=True)
class PromptPack:
    """The exact surface tokens of the block format.

    Frozen defaults match the shipped fine-tuning format; prompted backends
    can swap in their own strings without touching parser logic.
    """

    types_header: str = "# Key Information Types"
    dialogue_header: str = "# Dialogue"
    values_header: str = "# Key Information Values"
    instruction: str = "Identify Key Information Values from the Dialogue"
    revision_instruction: str = "Revise the Key Information Types to remove redundant or invalid entries"
    user_label: str = "User"
    agent_label: str = "Agent"


DEFAULT_PACK = PromptPack()


def _display_domain(domain: str) -> str:
    return domain.title()


def render_schema_block(schema: SlotSchema, pack: PromptPack = DEFAULT_PACK) -> str:
    """Render the typed-slot catalog: one ``##`` section per domain."""
    lines = [pack.types_header]
    for domain in schema.domains():
        lines.append("")
        lines.append(f"## {_display_domain(domain)}")
        for slot in schema:
            if slot.key.domain == domain:
                lines.append(f"* {slot.key.name}: {slot.description}")
    return "\n".join(lines)


def parse_schema_block(
    text: str, pack: PromptPack = DEFAULT_PACK
) -> Tuple[SlotSchema, List[str]]:
    """Parse a rendered slot catalog back into a SlotSchema.

    Tolerant: malformed lines yield warnings and are skipped. Raises
    MissingTypesHeader when the header is absent entirely.
    """
    lines = text.splitlines()
    try:
        start = next(i for i, ln in enumerate(lines) if ln.strip() == pack.types_header)
    except StopIteration:
        raise MissingTypesHeader(f"no {pack.types_header!r} line found") from None

    warnings: List[str] = []
    slots: List[SlotDef] = []
    seen = {}
    domain: Optional[str] = None
    for lineno, raw in enumerate(lines[start + 1 :], start=start + 2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("## "):
            domain = line[3:].strip()
            if not domain:
                warnings.append(f"line {lineno}: empty domain header")
                domain = None
            continue
        if line.startswith("# "):
            break  # next top-level block
        if line.startswith("* "):
            if domain is None:
                warnings.append(f"line {lineno}: bullet outside any domain section")
                continue
            name, sep, description = line[2:].partition(":")
            if not sep:
                warnings.append(f"line {lineno}: bullet without colon: {line!r}")
                continue
            try:
                key = canonical_slot_key(domain, name)
            except InvalidSlotName:
                warnings.append(f"line {lineno}: empty slot name")
                continue
            if key in seen:
                warnings.append(f"line {lineno}: duplicate slot {key}")
            seen[key] = SlotDef(key, description.strip())
            continue
        warnings.append(f"line {lineno}: unrecognized line {line!r}")
    slots = list(seen.values())
    return SlotSchema(tuple(slots)), warnings


def render_state_block(state: DialogueState, pack: PromptPack = DEFAULT_PACK) -> str:
    """Render a dialogue state as a values block.

    Newly discovered slots (those in ``new_slot_descriptions``) get a
    trailing ``- <description>`` line. Output order is sorted by key for
    determinism.
    """
    lines = [pack.values_header]
    triples = sorted(state.triples, key=lambda kv: (kv[0], kv[1]))
    domain = None
    for key, value in triples:
        if key.domain != domain:
            domain = key.domain
            lines.append("")
            lines.append(f"## {_display_domain(domain)}")
        lines.append(f"* {key.name}: {value}")
        if key in state.new_slot_descriptions:
            lines.append(f"- {state.new_slot_descriptions[key]}")
    return "\n".join(lines)


@dataclass(frozen=True)
class PromptSequence:
    """One prompt: slot catalog, dialogue context, and instruction blocks."""

    schema_block: str
    dialogue_block: str
    instruction: str
    mode: StateMode
    revision_mode: bool = False

    def text(self) -> str:
        return "\n\n".join([self.schema_block, self.dialogue_block, self.instruction])


def _speaker_label(turn: Turn, pack: PromptPack) -> str:
    return pack.user_label if turn.speaker == USER else pack.agent_label


def build_prompt_sequence(
    schema: SlotSchema,
    dialogue: Dialogue,
    upto_turn: int,
    mode: StateMode,
    pack: PromptPack = DEFAULT_PACK,
    char_budget: Optional[int] = None,
) -> PromptSequence:
    """Assemble the prompt for predicting the state after ``upto_turn``.

    The dialogue block includes turns 0..upto_turn inclusive. When a
    character budget is given, the oldest turns are dropped (current turn is
    always kept) until the block fits.
    """
    if not 0 <= upto_turn < len(dialogue.turns):
        raise IndexError(f"upto_turn {upto_turn} out of range for {len(dialogue.turns)} turns")
    if mode is StateMode.FINAL and upto_turn != dialogue.last_user_turn_index():
        raise ValueError("final mode renders only at the last user turn")
    turn_lines = [
        f"{_speaker_label(t, pack)}: {t.text}" for t in dialogue.turns[: upto_turn + 1]
    ]
    if char_budget is not None:
        while len(turn_lines) > 1 and sum(len(ln) + 1 for ln in turn_lines) > char_budget:
            turn_lines.pop(0)
    dialogue_block = "\n".join([pack.dialogue_header, ""] + turn_lines)
    return PromptSequence(
        schema_block=render_schema_block(schema, pack),
        dialogue_block=dialogue_block,
        instruction=pack.instruction,
        mode=mode,
    )


def render_prompt(
    schema: SlotSchema,
    dialogue: Dialogue,
    upto_turn: int,
    mode: StateMode,
    pack: PromptPack = DEFAULT_PACK,
    char_budget: Optional[int] = None,
) -> str:
    return build_prompt_sequence(schema, dialogue, upto_turn, mode, pack, char_budget).text()


def render_revision_prompt(schema: SlotSchema, pack: PromptPack = DEFAULT_PACK) -> str:
    return "\n\n".join([render_schema_block(schema, pack), pack.revision_instruction])


@dataclass(frozen=True)
class ParsedPrediction:
    """Result of parsing a generated values block."""

    state: DialogueState
    parse_warnings: Tuple[str, ...] = ()
    revised_schema: Optional[SlotSchema] = None


def parse_state_block(
    text: str, known_schema: SlotSchema, pack: PromptPack = DEFAULT_PACK
) -> ParsedPrediction:
    """Parse arbitrary model output into a dialogue state.

    Keys that canonically match ``known_schema`` are existing-slot fills;
    unknown keys become discoveries carrying the optional ``- description``
    line that follows their bullet. Malformed lines produce warnings; the
    only hard failure is a missing values header.
    """
    lines = text.splitlines()
    try:
        start = next(i for i, ln in enumerate(lines) if ln.strip() == pack.values_header)
    except StopIteration:
        raise MissingValuesHeader(f"no {pack.values_header!r} line found") from None

    warnings: List[str] = []
    values = {}  # SlotKey -> str, last occurrence wins
    descriptions = {}  # SlotKey -> str for discoveries
    domain: Optional[str] = None
    last_key: Optional[SlotKey] = None
    for lineno, raw in enumerate(lines[start + 1 :], start=start + 2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("## "):
            domain = line[3:].strip() or None
            if domain is None:
                warnings.append(f"line {lineno}: empty domain header")
            last_key = None
            continue
        if line.startswith("# "):
            break
        if line.startswith("* "):
            last_key = None
            if domain is None:
                warnings.append(f"line {lineno}: value bullet outside any domain section")
                continue
            name, sep, value = line[2:].partition(":")
            if not sep:
                warnings.append(f"line {lineno}: bullet without colon: {line!r}")
                continue
            try:
                key = canonical_slot_key(domain, name)
            except InvalidSlotName:
                warnings.append(f"line {lineno}: empty slot name")
                continue
            if key in values:
                warnings.append(f"line {lineno}: duplicate value for {key}, keeping last")
                descriptions.pop(key, None)
            values[key] = value.strip()
            last_key = key
            continue
        if line.startswith("-"):
            description = line[1:].strip()
            if last_key is None:
                warnings.append(f"line {lineno}: description line without preceding bullet")
            elif last_key in known_schema:
                warnings.append(
                    f"line {lineno}: description attached to known slot {last_key}, ignored"
                )
            else:
                descriptions[last_key] = description
            last_key = None
            continue
        warnings.append(f"line {lineno}: unrecognized line {line!r}")
        last_key = None

    new_descriptions = {
        key: descriptions.get(key, "") for key in values if key not in known_schema
    }
    state = DialogueState.from_pairs(values.items(), new_descriptions)
    return ParsedPrediction(state, tuple(warnings))


# ---------------------------------------------------------------------------
# Corpus file I/O
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusFile:
    """A set of dialogues with an optional gold schema."""

    dialogues: Tuple[Dialogue, ...] = ()
    gold_schema: Optional[SlotSchema] = None
    format_version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "dialogues", tuple(self.dialogues))
        if self.gold_schema is not None:
            known = set(self.gold_schema.keys())
            for dialogue in self.dialogues:
                for i, turn in enumerate(dialogue.turns):
                    if turn.gold_state is None:
                        continue
                    stray = turn.gold_state.keys() - known
                    if stray:
                        raise CorpusFormatError(
                            f"dialogue {dialogue.id} turn {i}: gold state uses slots "
                            f"absent from gold schema: {sorted(map(str, stray))}"
                        )


def schema_to_obj(schema: SlotSchema) -> dict:
    domains = []
    for domain in schema.domains():
        domains.append(
            {
                "name": domain,
                "slots": [
                    {"name": slot.key.name, "description": slot.description}
                    for slot in schema
                    if slot.key.domain == domain
                ],
            }
        )
    return {"domains": domains}


def schema_from_obj(obj: dict, discovered_at=GOLD) -> SlotSchema:
    if not isinstance(obj, dict) or not isinstance(obj.get("domains"), list):
        raise CorpusFormatError("schema object must have a 'domains' list")
    slots: List[SlotDef] = []
    for dom in obj["domains"]:
        try:
            name = dom["name"]
            entries = dom["slots"]
        except (TypeError, KeyError) as exc:
            raise CorpusFormatError(f"malformed schema domain entry: {dom!r}") from exc
        for entry in entries:
            try:
                slots.append(
                    SlotDef(
                        canonical_slot_key(name, entry["name"]),
                        entry.get("description", ""),
                        discovered_at,
                    )
                )
            except (TypeError, KeyError, InvalidSlotName) as exc:
                raise CorpusFormatError(f"malformed slot entry: {entry!r}") from exc
    try:
        return SlotSchema(tuple(slots))
    except ValueError as exc:
        raise CorpusFormatError(str(exc)) from exc


def state_to_obj(state: DialogueState) -> dict:
    out: dict = {}
    for key, value in sorted(state.triples, key=lambda kv: (kv[0], kv[1])):
        out.setdefault(key.domain, {})[key.name] = value
    return out


def state_from_obj(obj: dict) -> DialogueState:
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"state must be an object, got {type(obj).__name__}")
    pairs = []
    for domain, slots in obj.items():
        if not isinstance(slots, dict):
            raise CorpusFormatError(f"state domain {domain!r} must map slots to values")
        for name, value in slots.items():
            try:
                pairs.append((canonical_slot_key(domain, name), str(value)))
            except InvalidSlotName as exc:
                raise CorpusFormatError(str(exc)) from exc
    return DialogueState.from_pairs(pairs)


def corpus_to_obj(corpus: CorpusFile) -> dict:
    return {
        "format_version": corpus.format_version,
        "gold_schema": schema_to_obj(corpus.gold_schema) if corpus.gold_schema else None,
        "dialogues": [
            {
                "id": d.id,
                "scenario_id": d.scenario_id,
                "turns": [
                    {
                        "speaker": t.speaker,
                        "text": t.text,
                        "state": state_to_obj(t.gold_state) if t.gold_state is not None else None,
                    }
                    for t in d.turns
                ],
            }
            for d in corpus.dialogues
        ],
    }


def corpus_from_obj(obj: dict) -> CorpusFile:
    if not isinstance(obj, dict):
        raise CorpusFormatError("corpus file must contain a JSON object")
    for field_name in ("format_version", "dialogues"):
        if field_name not in obj:
            raise CorpusFormatError(f"corpus file missing {field_name!r}")
    gold_schema = None
    if obj.get("gold_schema") is not None:
        gold_schema = schema_from_obj(obj["gold_schema"])
    dialogues = []
    for d in obj["dialogues"]:
        try:
            turns = []
            for t in d["turns"]:
                state = state_from_obj(t["state"]) if t.get("state") is not None else None
                turns.append(Turn(t["speaker"], t["text"], state))
            dialogues.append(Dialogue(d["id"], d["scenario_id"], tuple(turns)))
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, CorpusFormatError):
                raise
            raise CorpusFormatError(f"malformed dialogue entry: {exc}") from exc
    return CorpusFile(tuple(dialogues), gold_schema, int(obj["format_version"]))


def canonical_json(obj) -> str:
    """The one serialization used for all artifacts, so outputs byte-compare."""
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def load_corpus(path) -> CorpusFile:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return corpus_from_obj(obj)


def save_corpus(corpus: CorpusFile, path) -> None:
    Path(path).write_text(canonical_json(corpus_to_obj(corpus)), encoding="utf-8")


# ---------------------------------------------------------------------------
# Training sequences
# ---------------------------------------------------------------------------


def _require_gold(corpus: CorpusFile) -> SlotSchema:
    if corpus.gold_schema is None:
        raise MissingGoldError("corpus has no gold schema")
    for dialogue in corpus.dialogues:
        for i in dialogue.user_turn_indices():
            if dialogue.turns[i].gold_state is None:
                raise MissingGoldError(
                    f"dialogue {dialogue.id} turn {i} has no gold state"
                )
    return corpus.gold_schema


def _with_discoveries(
    state: DialogueState, introduced: set, gold_schema: SlotSchema
) -> DialogueState:
    new_descriptions = {
        key: (gold_schema.get(key).description if gold_schema.get(key) else "")
        for key in state.keys()
        if key not in introduced
    }
    return DialogueState(state.triples, new_descriptions)


def build_training_sequences(
    corpus: CorpusFile, mode: StateMode, pack: PromptPack = DEFAULT_PACK
) -> List[Tuple[str, str]]:
    """Build (prompt, target) pairs from a gold-labeled corpus.

    The prompt schema at each turn is the gold schema restricted to slots
    already introduced earlier in the stream; target states mark slots first
    appearing at the current turn as discoveries with their gold
    descriptions.
    """
    gold_schema = _require_gold(corpus)
    introduced: set = set()
    pairs: List[Tuple[str, str]] = []
    for dialogue in corpus.dialogues:
        user_turns = dialogue.user_turn_indices()
        if mode is StateMode.FINAL:
            user_turns = user_turns[-1:]
        prev_state = DialogueState()
        for turn_index in user_turns:
            gold_state = dialogue.turns[turn_index].gold_state
            assert gold_state is not None
            if mode is StateMode.UPDATE:
                delta = frozenset(
                    (key, value)
                    for key, value in gold_state.triples
                    if prev_state.value_of(key) != value
                )
                target_state = DialogueState(delta)
            else:
                target_state = gold_state
            target_state = _with_discoveries(target_state, introduced, gold_schema)
            prompt_schema = gold_schema.restricted_to(introduced)
            prompt = render_prompt(prompt_schema, dialogue, turn_index, mode, pack)
            pairs.append((prompt, render_state_block(target_state, pack)))
            introduced |= gold_state.keys()
            prev_state = gold_state
        if mode is StateMode.FINAL:
            # slots never surfaced at the final turn still count as introduced
            for i in dialogue.user_turn_indices():
                state = dialogue.turns[i].gold_state
                if state is not None:
                    introduced |= state.keys()
    return pairs


def save_training_pairs(pairs: Iterable[Tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for prompt, target in pairs:
            fh.write(json.dumps({"prompt": prompt, "target": target}, ensure_ascii=False))
            fh.write("\n")


def load_training_pairs(path) -> List[Tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                pairs.append((obj["prompt"], obj["target"]))
    return pairs
