import contextlib

import torch


@contextlib.contextmanager
def seeded(seed):
    """Run a block under a fixed global torch seed without leaking RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype if dtype is not None else torch.get_default_dtype())
