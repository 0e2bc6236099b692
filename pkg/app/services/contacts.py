"""
设备端状态：接触记录、每日密钥、收到的通知，以及两种方案共用的风险计算
"""
from app.core.constants import RETENTION_DAYS, ROTATION_PERIOD_S
from app.schemas.scenario import RadioParams, TracingParams
from app.services.identifiers import DiagnosisKey, EphemeralId, is_expired, retention_prune
from app.services.radio import Reception, estimate_distance
from app.services.world import SimClock
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import math
import numpy as np
import logging

logger = logging.getLogger(__name__)

TRUE_CONTACT = "true_contact"
RELAY_ATTACK = "relay_attack"
REPLAY_ATTACK = "replay_attack"


class ContactRecord:
    """设备对某一个临时标识的接收证据（一个记录只对应一个标识）"""

    __slots__ = ("eid", "first_tick", "last_tick", "ticks", "rssi", "causes")

    def __init__(self, eid: EphemeralId, tick: int):
        self.eid = eid
        self.first_tick = tick
        self.last_tick = tick
        self.ticks: List[int] = []
        self.rssi: List[float] = []
        self.causes: List[str] = []

    def add_sample(self, tick: int, rssi_db: float, cause: str = "true") -> None:
        self.ticks.append(tick)
        self.rssi.append(rssi_db)
        self.causes.append(cause)
        if tick < self.first_tick:
            self.first_tick = tick
        if tick > self.last_tick:
            self.last_tick = tick

    @property
    def rssi_samples(self) -> List[Tuple[int, float]]:
        return list(zip(self.ticks, self.rssi))

    def restricted(self, start_tick: int, end_tick: int) -> Optional["ContactRecord"]:
        """只保留 [start_tick, end_tick] 内的样本；为空时返回None"""
        kept = ContactRecord(self.eid, self.first_tick)
        first = True
        for tick, level, cause in zip(self.ticks, self.rssi, self.causes):
            if start_tick <= tick <= end_tick:
                if first:
                    kept.first_tick = kept.last_tick = tick
                    first = False
                kept.add_sample(tick, level, cause)
        return None if first else kept

    def __repr__(self):
        return f"<ContactRecord(eid={self.eid.hex()[:8]}, ticks={self.first_tick}..{self.last_tick}, n={len(self.ticks)})>"


@dataclass
class ExposureNotification:
    """发给用户的暴露通知；cause 只用于评分，协议逻辑看不到"""
    agent_id: int
    trigger_tick: int
    risk_score: float
    protocol: str
    cause: str = TRUE_CONTACT
    report_tick: Optional[int] = None


@dataclass
class DeviceState:
    """一台安装了应用的手机"""
    owner: int
    rng: Optional[np.random.Generator] = None
    # 去中心化：按天保存的诊断密钥（14天环）
    daily_keys: Dict[int, DiagnosisKey] = field(default_factory=dict)
    # 中心化：服务端下发的标识，按天保存
    issued_ids: Dict[int, List[EphemeralId]] = field(default_factory=dict)
    pseudonym: Optional[str] = None
    # 已发送标识：绝对时间片序号 -> 标识
    sent_ids: Dict[int, EphemeralId] = field(default_factory=dict)
    current_eid: Optional[EphemeralId] = None
    received: Dict[EphemeralId, ContactRecord] = field(default_factory=dict)
    # 本地匹配累计过的标识，风险在这些记录上累计
    matched: Dict[EphemeralId, ContactRecord] = field(default_factory=dict)
    notified: bool = False
    reported: bool = False
    report_tick: Optional[int] = None
    # 本机持有过的全部密钥，用于排除自匹配
    key_history: set = field(default_factory=set)
    # 参与匹配的最近一次上报时刻（计算通知延迟）
    matched_report_tick: Optional[int] = None

    def prune(self, now: SimClock) -> None:
        """按保留窗口清理接收记录、已发送标识和旧密钥"""
        self.received = retention_prune(self.received, now, timestamp=lambda record: record.last_tick)
        ticks_per_interval = now.ticks_per_interval
        self.sent_ids = {
            interval: eid for interval, eid in self.sent_ids.items()
            if not is_expired(interval * ticks_per_interval, now)
        }
        oldest_day = now.day_index - (RETENTION_DAYS - 1)
        self.daily_keys = {day: key for day, key in self.daily_keys.items() if day >= oldest_day}


def on_reception(device: DeviceState, reception: Reception) -> DeviceState:
    """把一次接收并入对应标识的接触记录"""
    record = device.received.get(reception.sender_eid)
    if record is None:
        record = ContactRecord(reception.sender_eid, reception.tick)
        device.received[reception.sender_eid] = record
    record.add_sample(reception.tick, reception.rssi_db, reception.cause)
    return device


def on_reception_batch(devices: Sequence[Optional[DeviceState]], receivers: Sequence[int],
                       senders: Sequence[int], eids: Sequence[Optional[EphemeralId]], tick: int,
                       rssi_db: Sequence[float], cause: str = "true") -> int:
    """一个tick内的全部接收一次并入，结果与逐条调用 on_reception 相同

    devices 和 eids 都按人的下标索引；返回并入的接收数。
    """
    count = 0
    for receiver, sender, level in zip(receivers, senders, rssi_db):
        eid = eids[sender]
        store = devices[receiver].received  # type: ignore[union-attr]
        record = store.get(eid)  # type: ignore[arg-type]
        if record is None:
            record = ContactRecord(eid, tick)  # type: ignore[arg-type]
            store[eid] = record  # type: ignore[index]
        record.ticks.append(tick)
        record.rssi.append(level)
        record.causes.append(cause)
        if tick > record.last_tick:
            record.last_tick = tick
        elif tick < record.first_tick:
            record.first_tick = tick
        count += 1
    return count


def _close_ticks(records: Iterable[ContactRecord], tracing: TracingParams, radio: RadioParams,
                 causes: Optional[set] = None) -> int:
    """估计距离不超过阈值的采样tick数（每条记录内同一tick只计一次）"""
    total = 0
    for record in records:
        if not record.ticks:
            continue
        distances = estimate_distance(np.asarray(record.rssi), radio)
        close = np.atleast_1d(distances) <= tracing.proximity_threshold_m
        seen = set()
        for tick, is_close, cause in zip(record.ticks, close, record.causes):
            if is_close and (causes is None or cause in causes):
                seen.add(tick)
        total += len(seen)
    return total


def compute_risk(records: Iterable[ContactRecord], tracing: TracingParams, radio: RadioParams,
                 step_minutes: float) -> float:
    """风险 = 估计距离在阈值以内的接触分钟数"""
    return _close_ticks(records, tracing, radio) * step_minutes


def is_exposed(risk: float, tracing: TracingParams) -> bool:
    """风险达到阈值（没有任何近距离接触时永远不算暴露）"""
    return risk > 0 and risk >= tracing.exposure_minutes_threshold


def validity_window(interval_number: int, tracing: TracingParams, step_seconds: int) -> Tuple[int, int]:
    """标识可被接受的tick范围（时间片前后各放宽 eid_tolerance_s）"""
    start_s = interval_number * ROTATION_PERIOD_S - tracing.eid_tolerance_s
    end_s = (interval_number + 1) * ROTATION_PERIOD_S + tracing.eid_tolerance_s
    return math.ceil(start_s / step_seconds), math.ceil(end_s / step_seconds) - 1


def attribute_cause(records: List[ContactRecord], tracing: TracingParams, radio: RadioParams,
                    step_minutes: float) -> str:
    """评分用：只看真实接触样本就已达阈值则为真实接触，否则按攻击样本多数归因"""
    true_risk = _close_ticks(records, tracing, radio, causes={"true"}) * step_minutes
    if is_exposed(true_risk, tracing):
        return TRUE_CONTACT
    relay = _close_ticks(records, tracing, radio, causes={"relay"})
    replay = _close_ticks(records, tracing, radio, causes={"replay"})
    if relay == 0 and replay == 0:
        return TRUE_CONTACT
    return RELAY_ATTACK if relay >= replay else REPLAY_ATTACK
