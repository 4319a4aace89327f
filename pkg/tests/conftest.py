import pytest

from sagesim import SageEnv
from sagesim.workloads import standard_topology


@pytest.fixture
def env():
    return SageEnv.boot(standard_topology(7))


@pytest.fixture
def ctx(env):
    return env.ctx


def write_stable(env, obj, offset, data):
    env.ctx.run(env.ctx.obj_write(obj, offset, data), "STABLE")


def read_bytes(env, obj, offset, nblocks):
    return env.ctx.run(env.ctx.obj_read(obj, offset, nblocks))
