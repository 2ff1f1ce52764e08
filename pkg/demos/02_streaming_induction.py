"""Stream a small corpus through the induction engine with a scripted
backend and watch the schema grow, then re-track it in two-pass mode.

Run from the repository root: python3 demos/02_streaming_induction.py
"""

from slotweaver.backend import ScriptedBackend
from slotweaver.core import Dialogue, Turn
from slotweaver.induct import run_two_pass
from slotweaver.seqio import CorpusFile, StateMode


def dialogue(i, text):
    return Dialogue(f"d{i}", "demo", (Turn("user", text), Turn("agent", "Noted.")))


corpus = CorpusFile(
    dialogues=(
        dialogue(0, "I need a cheap hotel in the north."),
        dialogue(1, "A train on friday, please."),
        dialogue(2, "The hotel should be in the north and have parking."),
    )
)

replies = [
    "# Key Information Values\n\n## Hotel\n* area: north\n- the part of town\n"
    "* price: cheap\n- the price range\n",
    "# Key Information Values\n\n## Train\n* day: friday\n- the travel day\n",
    "# Key Information Values\n\n## Hotel\n* area: north\n* parking: yes\n"
    "- whether parking is included\n",
]

backend = ScriptedBackend.from_responses(replies * 2)  # pass 1 + pass 2
schema, pass2 = run_two_pass(corpus, StateMode.STATE, None, backend)

print("=== schema induced in pass 1 ===")
for slot in schema:
    print(f"  {slot.key}: {slot.description} (discovered at {slot.discovered_at})")

print("=== states re-tracked in pass 2 against the frozen schema ===")
for entry in pass2.state_log:
    values = ", ".join(f"{k}={v}" for k, v in sorted(entry.state.triples))
    print(f"  {entry.dialogue_id} turn {entry.turn_index}: {values}")
