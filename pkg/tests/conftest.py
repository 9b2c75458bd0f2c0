import os
import random

import pytest

from app.models.inspection import PAGE_SIZE
from app.models.x86 import MachineState, Reg
from app.services.samples import CODE_BASE, handcrafted_a, handcrafted_b, protected_sample
from app.services.x86_interp import FlatMemory, SimpleEnv

FULL_CAMPAIGN = os.getenv('ERIM_FULL_CAMPAIGN', '0') == '1'


def campaign_size(full, reduced):
    return full if FULL_CAMPAIGN else reduced


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance campaign")


@pytest.fixture
def rng():
    return random.Random(int(os.getenv('ERIM_FORGE_SEED', 0)))


@pytest.fixture
def protected():
    return protected_sample()


@pytest.fixture(params=["handcrafted-a", "handcrafted-b"])
def handcrafted(request):
    return handcrafted_a() if request.param == "handcrafted-a" else handcrafted_b()


@pytest.fixture
def run_code():
    """Interpret `code` loaded at `base` until it exits or faults."""
    from app.services.x86_interp import X86Interpreter

    def run(code, base=CODE_BASE, state=None, max_steps=10_000, extra=()):
        memory = FlatMemory(auto_map=True)
        memory.load(base, code)
        for address, data in extra:
            memory.load(address, data)
        state = state or MachineState()
        state.rip = base
        if not state.get(Reg.RSP):
            state.set(Reg.RSP, 0x7FFF_0000_0000)
        env = SimpleEnv(memory)
        outcome, steps = X86Interpreter.run(state, env, max_steps)
        return outcome, state, env

    return run


def page(fill=0):
    return bytes([fill]) * PAGE_SIZE
