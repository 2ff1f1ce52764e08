"""Show the confidence-window filter evicting a slot that stops being
filled, while a steadily used slot survives.

Run from the repository root: python3 demos/03_schema_refinement.py
"""

from slotweaver.core import DialogueState, SlotDef, SlotSchema, canonical_slot_key
from slotweaver.refine import FilterConfig, SlotStats, confidence_filter, record_state

steady = canonical_slot_key("hotel", "area")
flash = canonical_slot_key("hotel", "fax number")

schema = SlotSchema((SlotDef(steady, "", (0, 0)), SlotDef(flash, "", (0, 0))))
cfg = FilterConfig(window_w=4, threshold_tau=1)

stats = SlotStats()
for dialogue_index in range(10):
    pairs = [(steady, "north")]
    if dialogue_index == 0:
        pairs.append((flash, "555-0100"))  # filled once, then never again
    stats = record_state(stats, DialogueState.from_pairs(pairs), dialogue_index)
    schema = confidence_filter(schema, stats, cfg, dialogue_index)
    names = ", ".join(str(k) for k in schema.keys())
    print(f"after dialogue {dialogue_index}: [{names}]")
