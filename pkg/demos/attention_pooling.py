"""
Query-conditioned support prototypes
====================================

Attention pooling builds, for every query window, a prototype from the
support windows of one class, weighted by their similarity to that window.
The result does not depend on the order of the support windows.
"""
import numpy as np

from atomic_fsl import Tensor, attention_pool, init_pooling, init_relation, mutual_refine, relation_scores

rng = np.random.default_rng(0)
F = 4


def unit_rows(n):
    x = rng.normal(size=(n, F))
    return Tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


support = [unit_rows(6), unit_rows(6)]  # two classes, six windows each
query = unit_rows(3)
pooling = init_pooling(F)

proto = attention_pool(support[0], query, pooling)
print("prototype for each query window:\n", np.round(proto.data, 3))

shuffled = Tensor(support[0].data[rng.permutation(6)])
print("max change after shuffling support windows:",
      np.abs(attention_pool(shuffled, query, pooling).data - proto.data).max())

# mutual refinement also nudges the query towards each class's support
pairs = [mutual_refine(S, query, pooling) for S in support]
dist = relation_scores([q for _, q in pairs], [s for s, _ in pairs], init_relation(F, hidden=8))
print("per-window P(class 0, class 1, blank):\n", np.round(dist.data, 3))
print("row sums", dist.data.sum(axis=1))
