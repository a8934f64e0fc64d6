"""Named, reproducible random substreams derived from a single integer seed."""
import numpy as np

STREAMS = {"corrupt": 0, "init": 1, "train": 2, "impute": 3, "loglik": 4, "knn": 5}


def substream(seed, name, *ids):
    """Independent generator for stage ``name`` (and optional row ids) of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, ids)]))
