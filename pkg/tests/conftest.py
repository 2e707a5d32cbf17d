import itertools
import os
import shutil
import tempfile

import pytest

from rpcool.config import OrchestratorConfig, RuntimeConfig
from rpcool.orchestrator import OrchestratorServer
from rpcool.runtime import NodeRuntime, make_holder_id

# Each test gets a disjoint slice of the pool address range so a mapping
# leaked by a failed test cannot collide with the next test's heaps.
_pool_slices = itertools.count()
POOL_SLICE_SPAN = 1 << 36  # 64 GiB per test


@pytest.fixture
def pool_base():
    return 0x7C00_0000_0000 + next(_pool_slices) * POOL_SLICE_SPAN


@pytest.fixture(autouse=True)
def clean_sandbox_tls():
    # a test that dies mid-sandbox must not poison the next test's thread
    from rpcool.runtime import process_address_space

    yield
    process_address_space().tls.sandbox = None


@pytest.fixture
def pool_dir():
    d = tempfile.mkdtemp(prefix="rpcool-test-", dir="/dev/shm")
    yield d
    shutil.rmtree(d, ignore_errors=True)


@pytest.fixture
def orch_config(pool_base):
    return OrchestratorConfig(
        endpoint=("127.0.0.1", 0),
        pool_base=pool_base,
        pool_span=POOL_SLICE_SPAN,
        lease_period=0.05,
        sweep_interval=0.02,
    )


@pytest.fixture
def orch(orch_config):
    server = OrchestratorServer(orch_config).start()
    yield server
    server.stop()


def _runtime_config(orch, pool_dir, **kw):
    return RuntimeConfig(
        pool_dir=pool_dir,
        orch_endpoint=orch.endpoint,
        lease_renew_period=0.02,
        **kw,
    )


@pytest.fixture
def runtime_config(orch, pool_dir):
    return _runtime_config(orch, pool_dir)


@pytest.fixture
def runtime(runtime_config):
    rt = NodeRuntime(runtime_config)
    yield rt
    rt.close()


@pytest.fixture
def second_runtime(runtime_config):
    rt = NodeRuntime(runtime_config, holder=make_holder_id())
    yield rt
    rt.close()


@pytest.fixture
def make_runtime(orch, pool_dir):
    made = []

    def factory(**kw):
        rt = NodeRuntime(_runtime_config(orch, pool_dir, **kw), holder=make_holder_id())
        made.append(rt)
        return rt

    yield factory
    for rt in made:
        try:
            rt.close()
        except Exception:
            pass
