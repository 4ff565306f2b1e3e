"""The gradient-check harness itself, and a quick sweep over layer kinds.

The full 20-seed suite runs in the acceptance tests; here a smaller sweep
keeps the unit run fast while covering every layer kind and both conv
paths.
"""

import numpy as np

from printkind.engine import FullyConnected, he_normal
from printkind.gradcheck import grad_check, run_full_gradcheck
from printkind.rng import make_rng


def test_linear_layer_error_at_roundoff_level():
    rng = make_rng(0)
    w = he_normal(rng, (6, 4), fan_in=6)
    b = rng.standard_normal(4).astype(np.float32)
    x = rng.standard_normal((3, 6)).astype(np.float32)
    # FD is exact for affine maps up to float64 roundoff.
    assert grad_check(FullyConnected(w, b), x) < 1e-7


def test_quick_sweep_all_layer_kinds():
    results = run_full_gradcheck(seeds=3)
    assert set(results) == {
        "conv",
        "conv-fft",
        "avgpool",
        "relu",
        "fully-connected",
        "softmax-xent",
    }
    for kind, err in results.items():
        assert err < 1e-4, f"{kind}: {err}"
