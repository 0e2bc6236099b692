"""
仿真世界：时钟、二维场地、人群与随机航点移动模型
"""
from app.core.constants import ROTATION_PERIOD_S, SECONDS_PER_DAY, INTERVALS_PER_DAY
from app.schemas.scenario import ScenarioConfig
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, TYPE_CHECKING
import numpy as np
import logging

if TYPE_CHECKING:
    from app.services.contacts import DeviceState

logger = logging.getLogger(__name__)


@dataclass
class SimClock:
    """仿真时钟：只有tick是状态，其余量都由tick推导"""
    step_seconds: int
    tick: int = 0

    @property
    def elapsed_seconds(self) -> int:
        return self.tick * self.step_seconds

    @property
    def interval_index(self) -> int:
        return self.elapsed_seconds // ROTATION_PERIOD_S

    @property
    def day_index(self) -> int:
        return self.elapsed_seconds // SECONDS_PER_DAY

    @property
    def interval_in_day(self) -> int:
        return self.interval_index % INTERVALS_PER_DAY

    @property
    def ticks_per_interval(self) -> int:
        return ROTATION_PERIOD_S // self.step_seconds

    @property
    def ticks_per_day(self) -> int:
        return SECONDS_PER_DAY // self.step_seconds

    def is_interval_boundary(self) -> bool:
        return self.tick % self.ticks_per_interval == 0

    def is_day_boundary(self) -> bool:
        return self.tick % self.ticks_per_day == 0

    def advance(self) -> None:
        self.tick += 1

    def day_of(self, tick: int) -> int:
        return tick * self.step_seconds // SECONDS_PER_DAY

    def interval_of(self, tick: int) -> int:
        return tick * self.step_seconds // ROTATION_PERIOD_S


class Stage(str, Enum):
    """健康阶段"""
    SUSCEPTIBLE = "S"
    EXPOSED = "E"
    INFECTIOUS = "I"
    DIAGNOSED = "D"
    RECOVERED = "R"


# 合法的阶段迁移 S→E→I→{D}→R
ALLOWED_TRANSITIONS = {
    Stage.SUSCEPTIBLE: {Stage.EXPOSED},
    Stage.EXPOSED: {Stage.INFECTIOUS},
    Stage.INFECTIOUS: {Stage.DIAGNOSED, Stage.RECOVERED},
    Stage.DIAGNOSED: {Stage.RECOVERED},
    Stage.RECOVERED: set(),
}


@dataclass
class HealthState:
    """个体健康状态"""
    stage: Stage = Stage.SUSCEPTIBLE
    since_tick: int = 0
    infectious_since: Optional[int] = None
    # 各阶段持续的tick数（进入E时确定）
    incubation_ticks: int = 0
    infectious_ticks: int = 0
    quarantined: bool = False
    quarantine_until: Optional[int] = None

    @property
    def is_infectious(self) -> bool:
        return self.stage in (Stage.INFECTIOUS, Stage.DIAGNOSED)

    @property
    def ever_infected(self) -> bool:
        return self.stage != Stage.SUSCEPTIBLE


@dataclass
class Agent:
    """仿真中的个体

    位置、航点和速度保存在World的数组里（结构数组），这里只保留身份与状态。
    """
    agent_id: int
    has_app: bool
    health: HealthState = field(default_factory=HealthState)
    device: Optional["DeviceState"] = None


class World:
    """二维有界场地及其中的人群"""

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator, adoption_rng: np.random.Generator):
        self.config = config
        self.width = config.world_width_m
        self.height = config.world_height_m
        self.step_seconds = config.step_seconds
        self.clock = SimClock(step_seconds=config.step_seconds)
        self.rng = rng

        n = config.n_agents
        # 每人一次均匀抽样决定是否安装应用
        has_app = adoption_rng.random(n) < config.adoption_fraction
        self.agents: List[Agent] = [Agent(agent_id=i, has_app=bool(has_app[i])) for i in range(n)]

        self.positions = self._uniform_points(n)
        self.waypoints = self._uniform_points(n)
        self.speeds = self._draw_speeds(n)
        self.pause_ticks = np.zeros(n, dtype=np.int64)

    def _uniform_points(self, count: int) -> np.ndarray:
        points = self.rng.random((count, 2))
        points[:, 0] *= self.width
        points[:, 1] *= self.height
        return points

    def _draw_speeds(self, count: int) -> np.ndarray:
        return self.rng.uniform(self.config.speed_min_mps, self.config.speed_max_mps, count)

    def _draw_pauses(self, count: int) -> np.ndarray:
        if self.config.pause_max_s <= 0:
            return np.zeros(count, dtype=np.int64)
        seconds = self.rng.uniform(self.config.pause_min_s, self.config.pause_max_s, count)
        return np.round(seconds / self.step_seconds).astype(np.int64)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def app_mask(self) -> np.ndarray:
        return np.array([agent.has_app for agent in self.agents], dtype=bool)

    def quarantine_mask(self) -> np.ndarray:
        return np.array([agent.health.quarantined for agent in self.agents], dtype=bool)

    def position(self, agent_id: int) -> tuple:
        x, y = self.positions[agent_id]
        return float(x), float(y)

    def in_bounds(self) -> bool:
        """包含性检查：所有人都在 [0,W]×[0,H] 内"""
        if self.n_agents == 0:
            return True
        xs, ys = self.positions[:, 0], self.positions[:, 1]
        return bool(np.all((xs >= 0) & (xs <= self.width) & (ys >= 0) & (ys <= self.height)))


def step_mobility(world: World) -> World:
    """随机航点移动一步

    每人以自身速度朝航点前进 speed×step_seconds 米；到达（不越过）航点后
    抽取新的航点、速度和停留时间。隔离中的人原地不动。
    """
    n = world.n_agents
    if n == 0:
        return world

    frozen = world.quarantine_mask()
    paused = world.pause_ticks > 0
    # 停留计时只在未隔离时消耗
    world.pause_ticks[paused & ~frozen] -= 1

    movable = ~frozen & ~paused
    delta = world.waypoints - world.positions
    distance = np.hypot(delta[:, 0], delta[:, 1])
    step_length = world.speeds * world.step_seconds

    arrived = movable & (distance <= step_length)
    moving = movable & ~arrived & (step_length > 0)

    if np.any(moving):
        scale = (step_length[moving] / distance[moving])[:, None]
        world.positions[moving] += delta[moving] * scale

    if np.any(arrived):
        idx = np.flatnonzero(arrived)
        world.positions[idx] = world.waypoints[idx]
        world.waypoints[idx] = world._uniform_points(len(idx))
        world.speeds[idx] = world._draw_speeds(len(idx))
        world.pause_ticks[idx] = world._draw_pauses(len(idx))

    # 浮点误差不能把人推出边界
    np.clip(world.positions[:, 0], 0.0, world.width, out=world.positions[:, 0])
    np.clip(world.positions[:, 1], 0.0, world.height, out=world.positions[:, 1])
    return world


def pairwise_distances(world: World) -> np.ndarray:
    """所有人两两之间的欧氏距离（对称、对角为0）"""
    points = world.positions
    diff = points[:, None, :] - points[None, :, :]
    distances = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(distances, 0.0)
    return distances
