"""Run the four-stage dialogue simulation pipeline end to end with a
scripted backend, producing a state-annotated corpus.

Run from the repository root: python3 demos/05_simulation.py
"""

import random

from slotweaver.backend import ScriptedBackend
from slotweaver.sim import simulate_corpus
from slotweaver.sim import ScenarioSpec


def fence(text):
    return f"```\n{text}\n```"


scenarios = [
    ScenarioSpec(
        "scenario-000", "A Gardener", "a Florist", ("pick plants",),
        "A Gardener is getting help from a Florist in order to pick plants",
    )
]

backend = ScriptedBackend.keyed(
    [
        ("List the types of preferences", fence("color: The preferred bloom color")),
        ("actual knowledge items", fence("plant: the plant name\ncolor: bloom color")),
        ("candidate knowledge items",
         fence("plant = Rose\ncolor = Pink\n\nplant = Fern\ncolor = Green")),
        ("Fill in user preferences", fence("color = Pink")),
        ("similar to the goal", fence("plant = Tulip\ncolor = Red")),
        ("Record the preferences",
         "# Key Information Values\n\n## Pick Plants\n* color: Pink\n"),
        ("seeking help", "Hello, I am after something pink for the border."),
        ("providing help", "A rose would suit that nicely."),
        ("Answer yes or no", "yes"),
    ]
)

corpus, report = simulate_corpus(scenarios, 2, backend, random.Random(7))

print(f"produced {report.produced} dialogues, lost {report.lost}")
print(f"terminations: {dict(report.termination_histogram)}")
for dialogue in corpus.dialogues:
    print(f"=== {dialogue.id} ===")
    for turn in dialogue.turns:
        print(f"  {turn.speaker}: {turn.text}")
        if turn.gold_state:
            for key, value in sorted(turn.gold_state.triples):
                print(f"    [state] {key} = {value}")
