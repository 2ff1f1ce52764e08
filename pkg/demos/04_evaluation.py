"""Map predicted slots onto gold slots and compute the adjusted metrics.

Shows how splitting one gold slot across several predicted slots hurts
slot precision even though every value is correct.

Run from the repository root: python3 demos/04_evaluation.py
"""

from slotweaver.core import canonical_slot_key
from slotweaver.evalx import ValuedSlot, match_slots, slot_prf, value_prf


def vs(domain, name, *fills):
    return ValuedSlot(canonical_slot_key(domain, name), frozenset(fills))


gold = [
    vs("hotel", "area", ("d1", 0, "north"), ("d2", 0, "south"), ("d3", 0, "centre")),
    vs("hotel", "price", ("d1", 2, "cheap")),
]

predicted = [
    vs("hotel", "location", ("d1", 0, "north")),
    vs("hotel", "part of town", ("d2", 0, "south"), ("d3", 0, "centre")),
    vs("hotel", "budget", ("d1", 2, "cheap")),
]

mapping = match_slots(predicted, gold)
print("=== slot mapping ===")
for p, g in mapping.pairs:
    print(f"  {p} -> {g}")

s = slot_prf(mapping, predicted, gold)
v = value_prf(mapping)
print("=== metrics ===")
print(f"  slot  P={s.precision:.3f} R={s.recall:.3f} F1={s.f1:.3f}")
print(f"  value P={v.precision:.3f} R={v.recall:.3f} F1={v.f1:.3f}")
print("slot precision is 2/3: two predicted slots split the gold 'area' slot")
