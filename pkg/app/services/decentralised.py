"""
去中心化方案：手机自行生成密钥，确诊后上传诊断密钥，
服务端每24小时批量发布，匹配和风险计算都在手机本地完成。
"""
from sqlalchemy.orm import Session
from app.core.constants import INTERVALS_PER_DAY, KEY_BYTES, RETENTION_DAYS
from app.core.exceptions import DuplicateReportException
from app.models.server import DiagnosisReport, UploadedKey
from app.schemas.scenario import RadioParams, TracingParams
from app.services.centralised import load_blacklist
from app.services.contacts import (
    DeviceState, ExposureNotification, attribute_cause, compute_risk, is_exposed, validity_window
)
from app.services.identifiers import DiagnosisKey, EphemeralId, derive_ephemeral_id, expand_key
from app.services.world import SimClock
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple
import logging

logger = logging.getLogger(__name__)

PROTOCOL_NAME = "decentralised"


@dataclass
class KeyBatch:
    """一次发布的诊断密钥批次（不含任何假名或网络标识）"""
    publish_tick: int
    keys: List[DiagnosisKey] = field(default_factory=list)
    # 与 keys 一一对应的上传时刻
    upload_ticks: List[int] = field(default_factory=list)
    blacklist: FrozenSet[bytes] = frozenset()
    _expanded: Optional[Dict[EphemeralId, Tuple[int, int, bytes]]] = field(default=None, repr=False)

    def expanded(self) -> Dict[EphemeralId, Tuple[int, int, bytes]]:
        """标识 -> (绝对时间片序号, 上传时刻, 所属密钥)，整批只展开一次"""
        if self._expanded is None:
            mapping: Dict[EphemeralId, Tuple[int, int, bytes]] = {}
            for key, upload_tick in zip(self.keys, self.upload_ticks):
                base = key.day_index * INTERVALS_PER_DAY
                for i, eid in enumerate(expand_key(key)):
                    mapping[eid] = (base + i, upload_tick, key.key_bytes)
            self._expanded = mapping
        return self._expanded


class DecentralisedServer:
    """密钥发布服务端：只保存上传的密钥和时间戳"""

    def __init__(self, db: Session):
        self.db = db
        self.published: List[KeyBatch] = []

    def upload(self, keys: List[DiagnosisKey], tick: int) -> DiagnosisReport:
        """接收一次诊断上传"""
        if keys:
            existing = self.db.query(UploadedKey.id).filter(
                UploadedKey.key_bytes.in_([key.key_bytes for key in keys])
            ).first()
            if existing is not None:
                raise DuplicateReportException("诊断密钥已经上传过")
        report = DiagnosisReport(reporter_pseudonym_id=None, uploaded_tick=tick, unresolved_count=0)
        self.db.add(report)
        self.db.flush()
        for key in keys:
            self.db.add(UploadedKey(
                report_id=report.id, key_bytes=key.key_bytes, day_index=key.day_index, uploaded_tick=tick
            ))
        self.db.commit()
        logger.debug(f"Accepted {len(keys)} diagnosis keys at tick {tick}")
        return report

    def published_keys(self) -> List[DiagnosisKey]:
        return [key for batch in self.published for key in batch.keys]


def ensure_daily_key(device: DeviceState, day_index: int) -> DiagnosisKey:
    """设备当天的诊断密钥（没有就用设备自己的随机流生成）"""
    key = device.daily_keys.get(day_index)
    if key is None:
        key = DiagnosisKey(day_index=day_index, key_bytes=device.rng.bytes(KEY_BYTES))
        device.daily_keys[day_index] = key
        device.key_history.add(key.key_bytes)
    return key


def set_current_eid(device: DeviceState, clock: SimClock) -> EphemeralId:
    """时间片开始时切换广播标识"""
    key = ensure_daily_key(device, clock.day_index)
    eid = derive_ephemeral_id(key, clock.interval_in_day)
    device.current_eid = eid
    device.sent_ids[clock.interval_index] = eid
    return eid


def report_diagnosis(device: DeviceState, server: DecentralisedServer, now: SimClock) -> List[DiagnosisKey]:
    """上传保留窗口内的每日密钥（最多14个），之后轮换密钥"""
    if device.reported:
        raise DuplicateReportException(f"agent {device.owner} 已经上报过")
    oldest_day = now.day_index - (RETENTION_DAYS - 1)
    keys = [device.daily_keys[day] for day in sorted(device.daily_keys) if day >= oldest_day]
    server.upload(keys, now.tick)
    device.reported = True
    device.report_tick = now.tick

    device.daily_keys = {}
    set_current_eid(device, now)
    logger.info(f"Agent {device.owner} uploaded {len(keys)} diagnosis keys at tick {now.tick}")
    return keys


def publish_batch(server: DecentralisedServer, now: SimClock) -> KeyBatch:
    """发布自上一批以来上传的全部密钥（没有上传也发布空批次）"""
    rows = server.db.query(UploadedKey).filter(
        UploadedKey.published_tick.is_(None),
        UploadedKey.uploaded_tick <= now.tick,
    ).order_by(UploadedKey.id).all()

    batch = KeyBatch(
        publish_tick=now.tick,
        keys=[DiagnosisKey(day_index=row.day_index, key_bytes=row.key_bytes) for row in rows],
        upload_ticks=[row.uploaded_tick for row in rows],
        blacklist=load_blacklist(server.db),
    )
    for row in rows:
        row.published_tick = now.tick
    server.db.commit()
    server.published.append(batch)
    logger.info(f"Published key batch at tick {now.tick} with {len(batch.keys)} keys")
    return batch


def match_local(
    device: DeviceState,
    batch: KeyBatch,
    tracing: TracingParams,
    radio: RadioParams,
    now: SimClock,
) -> List[ExposureNotification]:
    """本地匹配：展开批次密钥，与收到的标识求交，风险达到阈值时产生通知"""
    if device.notified:
        return []
    expanded = batch.expanded()
    received = device.received
    # 遍历较小的一侧
    if len(expanded) < len(received):
        candidates = [eid for eid in expanded if eid in received]
    else:
        candidates = [eid for eid in received if eid in expanded]
    if not candidates:
        return []

    step_minutes = now.step_seconds / 60.0
    for eid in sorted(candidates):
        if eid in batch.blacklist:
            continue
        interval_number, upload_tick, key_bytes = expanded[eid]
        if key_bytes in device.key_history:
            continue
        start_tick, end_tick = validity_window(interval_number, tracing, now.step_seconds)
        record = device.received[eid].restricted(start_tick, end_tick)
        if record is None:
            continue
        device.matched[eid] = record
        device.matched_report_tick = max(device.matched_report_tick or 0, upload_tick)

    records = list(device.matched.values())
    risk = compute_risk(records, tracing, radio, step_minutes)
    if not is_exposed(risk, tracing):
        return []

    device.notified = True
    notification = ExposureNotification(
        agent_id=device.owner,
        trigger_tick=now.tick,
        risk_score=risk,
        protocol=PROTOCOL_NAME,
        cause=attribute_cause(records, tracing, radio, step_minutes),
        report_tick=device.matched_report_tick,
    )
    return [notification]
