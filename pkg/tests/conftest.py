import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from app.core.database import close_server_session, open_server_session
from app.schemas.scenario import ScenarioConfig
from app.services.world import SimClock

SCENARIO_DIR = project_root / "scenarios"
GOLDEN_DIR = Path(__file__).parent / "golden"


def make_config(**overrides) -> ScenarioConfig:
    """小规模、理想信道的场景（嵌套段用 dict 传入）"""
    data = {
        "name": "unit",
        "world_width_m": 60.0,
        "world_height_m": 60.0,
        "n_agents": 40,
        "adoption_fraction": 1.0,
        "pause_min_s": 600,
        "pause_max_s": 1800,
        "step_seconds": 300,
        "duration_days": 2,
        "rng_seed": 11,
        "radio": {"environment": "indoor", "noise_sigma_db": 0.0},
        "epidemic": {"p_transmit_per_contact_minute": 0.05, "initial_infected": 3, "test_delay_days": 1},
        "tracing": {"reporting_probability": 1.0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return ScenarioConfig.model_validate(data)


@pytest.fixture
def config_factory():
    return make_config


@pytest.fixture
def small_config():
    return make_config()


@pytest.fixture
def db_session():
    session = open_server_session("sqlite://")
    yield session
    close_server_session(session)


@pytest.fixture
def clock():
    """5分钟一步的时钟"""
    return SimClock(step_seconds=300)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture
def golden_dir():
    return GOLDEN_DIR


TINY_SCENARIO = """\
name = tiny
world_width_m = 60
world_height_m = 60
n_agents = 20
adoption_fraction = 1.0
pause_min_s = 600
pause_max_s = 1800
step_seconds = 300
duration_days = 1
rng_seed = 3
radio.environment = indoor
radio.noise_sigma_db = 0
epidemic.initial_infected = 2
epidemic.test_delay_days = 0.5
epidemic.p_transmit_per_contact_minute = 0.05
"""


@pytest.fixture
def tiny_scenario(tmp_path):
    """一天、20人的场景文件"""
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_SCENARIO, encoding="utf-8")
    return path
