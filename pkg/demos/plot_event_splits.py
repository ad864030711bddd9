"""
Event-disjoint splits
=====================

Pairs from one disaster event never straddle train and test. Events that
happened close together on the ground travel as a group.
"""

from collections import Counter

from xbd_baseline import ingest, synthetic

# A manifest of pair records with the per-event counts of the xBD split table.
pairs = synthetic.disjoint_manifest()
split = ingest.make_disjoint_split(ingest.events_from_pairs(pairs), pairs)
print("test events:", ", ".join(split.test_events))
for subset in ("train", "test"):
    print(subset, split.count(subset))

# Proximity groups stay together.
for group in sorted(set(ingest.PROXIMITY_GROUPS.values())):
    members = [e for e, g in ingest.PROXIMITY_GROUPS.items() if g == group]
    side = {("test" if e in split.test_events else "train") for e in members}
    print(f"{group}: {members} -> {side}")

# Carve a validation set out of train, stratified by event.
split = ingest.with_validation(split, fraction=0.1, seed=0)
print("val per event:", dict(sorted(Counter(p.event_name for p in split.pairs["val"]).items())))
