import numpy as np


def randomize_couplings(model, seed=0, amplitude=0.1):
    """Fill the zero-initialized final conv layers with random weights so a
    fresh model stops being the identity map (for bijection/probe tests)."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if not p.data.any():
            p.assign(amplitude * rng.standard_normal(p.data.shape).astype(p.data.dtype))
    return model
