import numpy as np

# one independent stream per (seed, purpose); adding purposes never shifts old ones
_PURPOSES = {
    "init": 1,
    "gates_init": 2,
    "split": 3,
    "batches": 4,
    "gates": 5,
    "dropout": 6,
    "attack": 7,
}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    key = (_PURPOSES[purpose], *extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
