"""
Implicit CTR with a click window
================================

A recommendation counts as clicked when its user interacts with one of the
listed items within ``d`` seconds, both ends included.
"""

from recgap import InteractionLog, RecommendationEvent, ictr

recs = [
    RecommendationEvent(100, "u1", ("a", "b")),
    RecommendationEvent(1000, "u2", ("c",)),
    RecommendationEvent(2000, "u3", ("d",)),
    RecommendationEvent(3000, "u4", ("e",)),
]
# u1 clicks b exactly 600 s later; u2 clicks c one second too late
log = InteractionLog(["u1", "u2"], ["b", "c"], [700, 1601])

for d in (0, 599, 600, 601, 3600):
    r = ictr(recs, log, d)
    print(f"d={d:5d}s  iCTR={r.value:.2f}  ({r.n_hits}/{r.n_events})")
