"""
Recall on a three-user toy log
==============================

Hold out each item a user touched, ask a popularity ranker to find it
again, and see how the plain and popularity-penalized recalls differ.
"""

from recgap import InteractionLog, ModelSpec, compute_popularity, recall_lloo, recall_loo, recall_loo_beta
from recgap.data import relevant_items
from recgap.offline import user_weight

# u1 touched a and b, u2 touched b and c, u3 only c
log = InteractionLog(["u1", "u1", "u2", "u2", "u3"], ["a", "b", "b", "c", "c"], [1, 2, 3, 4, 5])
model = ModelSpec("popularity").fit(log)

# every held-out item is searched for in the top-k of the rest of the profile
for k in (1, 2):
    r = recall_loo(log, model, k)
    print(f"LOO recall@{k} = {r.value:.3f}   per user {r.per_user}")

# the time-ordered variant only lets a user's past predict their future
print(f"LLOO recall@1 = {recall_lloo(log, model, 1).value:.3f}")

# with beta > 0, hits on rare items count for more
pop = compute_popularity(log)
for beta in (0.0, 0.5, 1.0):
    print(f"beta={beta:.1f}: penalized LOO recall@1 = {recall_loo_beta(log, model, 1, beta, pop).value:.4f}")

# users who touched more (and rarer) items carry more weight
rel = relevant_items(log)
for u in rel:
    print(u, [round(user_weight(u, rel, pop, b), 4) for b in (0.0, 1.0)])
