"""Shared fixtures: the default world and its pretrained base network.

Pretraining the default base takes about a minute, so it is built once per
session and shared by the quantitative denoiser tests and the acceptance
suite.  Everything is seeded; the fixture is bit-reproducible.
"""

from typing import NamedTuple

import numpy as np
import pytest

from tiflab.bench import build_pool
from tiflab.denoiser import Arch, DenoiserParams, OptConfig, pretrain_base, weights_hash
from tiflab.schedule import Schedule, make_linear_schedule
from tiflab.worldgen import WorldSpec, make_world


class Lab(NamedTuple):
    spec: WorldSpec
    sched: Schedule
    pool: np.ndarray
    params: DenoiserParams
    base_hash: str  # taken immediately after pretraining, before any adapters


@pytest.fixture(scope="session")
def default_lab() -> Lab:
    spec = make_world()
    sched = make_linear_schedule(1000, 1e-4, 0.02)
    pool = build_pool(spec, per_combo=12)
    params = pretrain_base(
        Arch(image_shape=spec.shape),
        pool,
        sched,
        OptConfig(lr=0.05, momentum=0.9, iters=6000, batch_size=64),
        seed=1,
    )
    return Lab(spec, sched, pool, params, weights_hash(params))
