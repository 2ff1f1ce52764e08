import random

import pytest

from slotweaver.core import (
    GOLD,
    Dialogue,
    DialogueState,
    SlotDef,
    SlotKey,
    SlotSchema,
    Turn,
    canonical_slot_key,
)

# Schema and output block mirroring the garden-planning example used
# throughout the tests: two domains, five known slots, one discovery.

GARDEN_SLOTS = [
    ("garden layouts", "style", "The preferred style of the garden layout."),
    ("garden layouts", "features", "Special features included in the layout."),
    ("garden layouts", "maintenance level", "The level of maintenance required."),
    ("plant selections", "type", "The type of plant, such as Flower, Shrub, Tree, or Grass."),
    ("plant selections", "color", "The color preference for the plant's blooms or foliage."),
]

GARDEN_GREEN_BLOCK = """# Key Information Values

## Garden Layouts
* style: desert
* features: fountain
* maintenance_level: low

## Plant Selections
* type: Flower
* color: Pink
* sunlight: Full Sun
- the plant's sun requirements
"""


@pytest.fixture
def garden_schema():
    return SlotSchema(
        tuple(SlotDef(canonical_slot_key(d, n), desc, GOLD) for d, n, desc in GARDEN_SLOTS)
    )


def key(domain: str, name: str) -> SlotKey:
    return canonical_slot_key(domain, name)


_WORDS = [
    "alpha", "beta", "gamma", "delta", "hotel", "train", "price", "area",
    "style", "color", "size", "time", "date", "name", "level", "type",
]


def random_key(rng: random.Random) -> SlotKey:
    return canonical_slot_key(rng.choice(_WORDS), f"{rng.choice(_WORDS)} {rng.choice(_WORDS)}")


def random_schema(rng: random.Random, max_slots: int = 8) -> SlotSchema:
    slots = {}
    for _ in range(rng.randrange(max_slots + 1)):
        k = random_key(rng)
        if k not in slots:
            slots[k] = SlotDef(k, rng.choice(["", "a thing", "the preferred value"]))
    return SlotSchema(tuple(slots.values()))


def random_state(rng: random.Random, max_triples: int = 6) -> DialogueState:
    values = {}
    for _ in range(rng.randrange(max_triples + 1)):
        values[random_key(rng)] = rng.choice(["red", "Blue 42", "cheap", "two pm", "N/A"])
    described = {k: "a discovered thing" for k in values if rng.random() < 0.4}
    return DialogueState.from_pairs(values.items(), described)


def make_dialogue(
    dialogue_id: str,
    n_user_turns: int,
    scenario_id: str = "scn",
    gold_states=None,
) -> Dialogue:
    turns = []
    for i in range(n_user_turns):
        state = gold_states[i] if gold_states else None
        turns.append(Turn("user", f"user message {i}", state))
        turns.append(Turn("agent", f"agent message {i}"))
    return Dialogue(dialogue_id, scenario_id, tuple(turns))
