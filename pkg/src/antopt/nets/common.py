"""Small shared pieces for the scoring networks."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def create_affine(store: ad.ParamStore, rng: np.random.Generator,
                  name: str, fan_in: int, fan_out: int):
    store.create(f"{name}/w", uniform_init(rng, fan_in, (fan_in, fan_out)))
    store.create(f"{name}/b", uniform_init(rng, fan_in, (fan_out,)))


def use_param(store: ad.ParamStore, name: str, tape) -> ad.Tensor:
    """Leaf tensor when training (tape given), plain constant otherwise."""
    if tape is None:
        return ad.Tensor(store.get(name))
    return store.use(name, tape)


def affine(x: ad.Tensor, store: ad.ParamStore, name: str, tape) -> ad.Tensor:
    out = ad.matmul(x, use_param(store, f"{name}/w", tape))
    return ad.add(out, use_param(store, f"{name}/b", tape))
