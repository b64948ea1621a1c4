"""Shared fixtures-as-functions for the test modules."""
import numpy as np

from omnilv.conditioning import InjectionPlan, init_params
from omnilv.dit import ModelConfig

MICRO = ModelConfig(image_size=16, patch_size=4, hidden_dim=16, num_heads=2, num_blocks=2,
                    instr_vocab_size=16, max_icl_pairs=1, adapter_depth=1)


def randomized(cfg=MICRO, plan=None, seed=0, scale=0.3):
    """init_params with every tensor jittered so no path is trivially zero."""
    params = init_params(cfg, plan, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, p in params.items():
        p.data[...] = p.data + scale * rng.normal(size=p.shape)
    return params


def images(n, cfg=MICRO, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, cfg.channels, cfg.image_size, cfg.image_size))


def all_plans():
    return [InjectionPlan.from_flag(f) for f in ("input", "first-frozen", "first", "second", "interval")]


# acceptance criterion number -> (passed, detail); printed by conftest at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
    return passed
