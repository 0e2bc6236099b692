from pydantic import AliasChoices, BaseModel, ConfigDict, Field, field_validator, model_validator
from app.core.constants import ROTATION_PERIOD_S, SECONDS_PER_DAY
from enum import Enum
from typing import List, Optional, Tuple


def _split_list(value):
    """场景文件里的列表以逗号分隔"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class Protocol(str, Enum):
    """追踪协议族"""
    DECENTRALISED = "decentralised"
    CENTRALISED = "centralised"


class RadioEnvironment(str, Enum):
    OUTDOOR = "outdoor"
    INDOOR = "indoor"


class OversightPolicy(str, Enum):
    RELEASE = "release"
    SUPPRESS = "suppress"


class HoldScope(str, Enum):
    EXCESS = "excess"
    REPORT = "report"


class RelayMode(str, Enum):
    CLOSE_BY_RELAY = "close_by_relay"
    REMOTE_SATELLITE = "remote_satellite"
    REPLAY = "replay"


class SnifferOperator(str, Enum):
    THIRD_PARTY = "third_party"
    CENTRAL_SERVER = "central_server"


class _Section(BaseModel):
    """配置段基类：未知字段直接报错"""
    model_config = ConfigDict(extra="forbid")


class RadioParams(_Section):
    """BLE信道参数"""
    environment: RadioEnvironment = Field(RadioEnvironment.OUTDOOR, description="室外50m / 室内25m")
    max_range_m: Optional[float] = Field(None, gt=0, description="最大接收距离，缺省由environment决定")
    rssi_at_1m_db: float = Field(-55.0, description="1米处参考信号强度")
    path_loss_exponent: float = Field(2.0, gt=0, description="路径损耗指数")
    noise_sigma_db: float = Field(3.0, ge=0, description="高斯阴影噪声标准差")
    detection_floor_db: float = Field(-95.0, description="最低可接收信号强度")
    discovery_probability: float = Field(1.0, ge=0, le=1, description="单次接收的发现成功率")

    @model_validator(mode="after")
    def _fill_range(self) -> "RadioParams":
        if self.max_range_m is None:
            self.max_range_m = 50.0 if self.environment == RadioEnvironment.OUTDOOR else 25.0
        return self


class EpidemicParams(_Section):
    """疫情参数"""
    p_transmit_per_contact_minute: float = Field(0.01, ge=0, le=1)
    infection_radius_m: float = Field(2.0, gt=0)
    incubation_days: float = Field(3.0, gt=0)
    infectious_days: float = Field(7.0, gt=0)
    test_delay_days: float = Field(2.0, gt=0, description="出现症状到确诊的延迟")
    initial_infected: int = Field(5, ge=0)
    initial_infected_ids: List[int] = Field(default_factory=list, description="指定的初始感染者")
    quarantine_compliance: float = Field(1.0, ge=0, le=1)
    quarantine_days: float = Field(14.0, gt=0)
    quarantine_transmission_factor: float = Field(0.0, ge=0, le=1)
    stochastic_durations: bool = False
    recovery_enabled: bool = True

    @field_validator("initial_infected_ids", mode="before")
    @classmethod
    def _split_ids(cls, value):
        return _split_list(value)


class TracingParams(_Section):
    """两种协议共用的追踪参数"""
    reporting_probability: float = Field(1.0, ge=0, le=1, description="确诊者同意上报的概率")
    proximity_threshold_m: float = Field(2.0, gt=0)
    exposure_minutes_threshold: float = Field(15.0, ge=0)
    eid_tolerance_s: int = Field(7200, ge=0, description="标识有效期两侧的容差")
    poll_interval_s: int = Field(3600, gt=0)
    fanout_threshold: int = Field(100, ge=1)
    oversight_policy: OversightPolicy = OversightPolicy.SUPPRESS
    hold_scope: HoldScope = HoldScope.EXCESS
    review_delay_s: int = Field(SECONDS_PER_DAY, ge=0)
    registration_limit_per_source: int = Field(5, ge=1)
    pow_difficulty_bits: int = Field(8, ge=0, le=24)
    blacklist_file: Optional[str] = None


class SnifferConfig(_Section):
    """嗅探网格"""
    grid_rows: int = Field(20, ge=1)
    grid_cols: int = Field(20, ge=1)
    positions: List[Tuple[float, float]] = Field(default_factory=list, description="自定义位置 x:y，优先于网格")
    range_m: Optional[float] = Field(None, gt=0, description="缺省等于radio.max_range_m")
    detection_probability: float = Field(1.0, ge=0, le=1)
    operator: SnifferOperator = SnifferOperator.THIRD_PARTY

    @field_validator("positions", mode="before")
    @classmethod
    def _parse_positions(cls, value):
        items = _split_list(value)
        parsed = []
        for item in items or []:
            if isinstance(item, str):
                x, _, y = item.partition(":")
                parsed.append((x, y))
            else:
                parsed.append(item)
        return parsed


class RelayConfig(_Section):
    """中继/重放攻击"""
    victim_agent_ids: List[int] = Field(default_factory=list, description="被跟随的即将确诊者")
    capture_x: Optional[float] = None
    capture_y: Optional[float] = None
    capture_radius_m: float = Field(10.0, gt=0)
    target_agent_ids: List[int] = Field(..., min_length=1)
    relay_latency_ticks: int = Field(1, ge=0)
    replay_delay_ticks: int = Field(0, ge=0, description="replay模式下额外的延迟")
    replay_distance_m: float = Field(1.0, gt=0)
    bidirectional: bool = True
    mode: RelayMode = RelayMode.CLOSE_BY_RELAY

    @field_validator("victim_agent_ids", "target_agent_ids", mode="before")
    @classmethod
    def _split_ids(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_zone(self) -> "RelayConfig":
        fixed = self.capture_x is not None or self.capture_y is not None
        if fixed and (self.capture_x is None or self.capture_y is None):
            raise ValueError("capture_x 与 capture_y 必须同时给出")
        if not fixed and not self.victim_agent_ids:
            raise ValueError("capture_x/capture_y 或 victim_agent_ids 至少给出一项")
        return self


class SybilConfig(_Section):
    """女巫攻击"""
    attacker_x: float
    attacker_y: float
    encounter_radius_m: float = Field(10.0, gt=0)
    bucket_seconds: int = Field(ROTATION_PERIOD_S, gt=0)
    accounts_requested: int = Field(100, ge=0)


class AttackConfig(_Section):
    sniffer: Optional[SnifferConfig] = None
    relay: Optional[RelayConfig] = None
    sybil: Optional[SybilConfig] = None

    @model_validator(mode="after")
    def _at_least_one(self) -> "AttackConfig":
        if self.sniffer is None and self.relay is None and self.sybil is None:
            raise ValueError("attack 段至少需要 sniffer / relay / sybil 之一")
        return self


class OutputParams(_Section):
    contacts_csv: bool = True
    receptions_csv: bool = False
    trajectories_csv: bool = False


class ScenarioConfig(_Section):
    """场景配置"""
    name: str = "scenario"
    world_width_m: float = Field(..., gt=0)
    world_height_m: float = Field(..., gt=0)
    n_agents: int = Field(..., ge=0)
    adoption_fraction: float = Field(
        0.8, ge=0, le=1, validation_alias=AliasChoices("adoption_fraction", "adoption")
    )
    speed_min_mps: float = Field(0.5, ge=0)
    speed_max_mps: float = Field(1.5, ge=0)
    pause_min_s: float = Field(0.0, ge=0)
    pause_max_s: float = Field(0.0, ge=0)
    step_seconds: int = Field(60, gt=0)
    duration_days: float = Field(14.0, gt=0)
    rng_seed: int = Field(0, ge=0, lt=2 ** 64)
    protocol: Protocol = Protocol.DECENTRALISED
    radio: RadioParams = Field(default_factory=RadioParams)
    epidemic: EpidemicParams = Field(default_factory=EpidemicParams)
    tracing: TracingParams = Field(default_factory=TracingParams)
    attack: Optional[AttackConfig] = None
    output: OutputParams = Field(default_factory=OutputParams)

    @model_validator(mode="after")
    def _check_invariants(self) -> "ScenarioConfig":
        if self.speed_min_mps > self.speed_max_mps:
            raise ValueError("speed_min_mps 必须不大于 speed_max_mps")
        if self.pause_min_s > self.pause_max_s:
            raise ValueError("pause_min_s 必须不大于 pause_max_s")
        if ROTATION_PERIOD_S % self.step_seconds != 0:
            raise ValueError(f"step_seconds 必须整除 {ROTATION_PERIOD_S}")
        total = self.duration_days * SECONDS_PER_DAY / self.step_seconds
        if abs(total - round(total)) > 1e-6:
            raise ValueError("duration_days 必须是 step_seconds 的整数倍")
        if self.tracing.poll_interval_s % self.step_seconds != 0:
            raise ValueError("tracing.poll_interval_s 必须是 step_seconds 的整数倍")
        for agent_id in self.epidemic.initial_infected_ids:
            if not 0 <= agent_id < self.n_agents:
                raise ValueError(f"epidemic.initial_infected_ids 越界: {agent_id}")
        if self.epidemic.initial_infected > self.n_agents:
            raise ValueError("epidemic.initial_infected 不能超过 n_agents")
        if self.attack is not None:
            self._check_attack(self.attack)
        return self

    def _check_attack(self, attack: AttackConfig) -> None:
        if attack.relay is not None:
            for agent_id in attack.relay.victim_agent_ids + attack.relay.target_agent_ids:
                if not 0 <= agent_id < self.n_agents:
                    raise ValueError(f"attack.relay 中的 agent_id 越界: {agent_id}")
        if attack.sybil is not None:
            bucket = attack.sybil.bucket_seconds
            if bucket % self.step_seconds != 0 or SECONDS_PER_DAY % bucket != 0:
                raise ValueError("attack.sybil.bucket_seconds 必须是 step_seconds 的倍数且整除一天")

    @property
    def ticks_per_day(self) -> int:
        return SECONDS_PER_DAY // self.step_seconds

    @property
    def ticks_per_interval(self) -> int:
        return ROTATION_PERIOD_S // self.step_seconds

    @property
    def total_ticks(self) -> int:
        return int(round(self.duration_days * SECONDS_PER_DAY / self.step_seconds))

    @property
    def step_minutes(self) -> float:
        return self.step_seconds / 60.0

    def without_protocol(self) -> dict:
        """用于比较两次运行是否为同一场景"""
        data = self.model_dump(mode="json")
        data.pop("protocol", None)
        data.pop("name", None)
        return data
