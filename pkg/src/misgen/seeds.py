"""Disjoint level-seed blocks for every pipeline stage.

Evaluation seeds never overlap any seed a learner or data collector touched.
"""

BLOCK = 10**8

TRAIN = 0 * BLOCK            # standard agent levels on E
FINETUNE = 1 * BLOCK         # fine-tuning levels on E' (no reward read)
COLLECT = 2 * BLOCK          # labeled transitions from E
EXPLORE = 3 * BLOCK          # unlabeled observations from E'
PROBE = 4 * BLOCK            # per-iteration training probes
EVAL = 10 * BLOCK            # held-out evaluation


def block_of(seed: int) -> int:
    return int(seed) // BLOCK * BLOCK
