"""
中心化方案：服务端签发与长期假名关联的临时标识，
确诊者上传收到的标识，由服务端匹配、标记并在用户轮询时通知；
服务端同时负责大规模通知监管和标识黑名单。
"""
from sqlalchemy import insert, select
from sqlalchemy.orm import Session
from app.core.constants import EID_BYTES, INTERVALS_PER_DAY, RETENTION_DAYS, SECONDS_PER_DAY
from app.core.exceptions import (
    ChallengeFailedException, DuplicateReportException, RateLimitExceededException, UnknownPseudonymException
)
from app.models.server import (
    BlacklistedId, ContactEvidence, DiagnosisReport, ExposureStatus, IssuedId,
    LocationObservation, OversightAlert, Pseudonym, RegistrationAttempt
)
from app.schemas.scenario import HoldScope, OversightPolicy, RadioParams, TracingParams
from app.services.contacts import (
    ContactRecord, DeviceState, ExposureNotification, attribute_cause, compute_risk, is_exposed, validity_window
)
from app.services.identifiers import EphemeralId
from app.services.world import SimClock
from app.utils.helpers import HashUtils
from app.utils.rate_limiter import RegistrationLimiter
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple
import math
import numpy as np
import logging

logger = logging.getLogger(__name__)

PROTOCOL_NAME = "centralised"

# SQLite 单条语句的参数个数有上限
_IN_CHUNK = 500


@dataclass(frozen=True)
class RegistrationChallenge:
    """注册挑战：服务端下发的随机数 + 客户端求得的工作量证明计数器（代替验证码）"""
    source: str
    nonce: bytes
    counter: int

    @property
    def payload(self) -> bytes:
        return self.source.encode() + self.nonce


def solve_challenge(source: str, nonce: bytes, difficulty_bits: int) -> RegistrationChallenge:
    """客户端求解注册挑战"""
    counter = HashUtils.solve_pow(source.encode() + nonce, difficulty_bits)
    return RegistrationChallenge(source=source, nonce=nonce, counter=counter)


def load_blacklist(db: Session) -> FrozenSet[bytes]:
    """读取当前黑名单（两种方案共用）"""
    return frozenset(row[0] for row in db.execute(select(BlacklistedId.eid)).all())


def blacklist_ids(db: Session, eids: Iterable[bytes], tick: int) -> int:
    """把标识加入黑名单，此后两种方案的匹配都不再计入它们；返回新增条数"""
    existing = load_blacklist(db)
    added = 0
    for eid in sorted(set(eids)):
        if eid in existing:
            continue
        db.add(BlacklistedId(eid=eid, added_tick=tick))
        added += 1
    db.commit()
    if added:
        logger.info(f"Blacklisted {added} ephemeral ids at tick {tick}")
    return added


def _chunks(items: List[bytes]) -> Iterable[List[bytes]]:
    for start in range(0, len(items), _IN_CHUNK):
        yield items[start:start + _IN_CHUNK]


class CentralisedServer:
    """中心化追踪服务端"""

    def __init__(self, db: Session, tracing: TracingParams, radio: RadioParams,
                 rng: np.random.Generator, step_seconds: int):
        self.db = db
        self.tracing = tracing
        self.radio = radio
        self.rng = rng
        self.step_seconds = step_seconds
        self.limiter = RegistrationLimiter(db)
        self._pseudonym_ids: Dict[str, int] = {}
        # 只用于评分：每个假名被标记时所依据的接收记录（带真值标签）
        self._scoring_records: Dict[int, List[ContactRecord]] = {}
        self._deliverable: Tuple[int, Dict[int, ExposureStatus]] = (-1, {})

    # ---- 注册与签发 ----

    def issue_challenge(self, source: str) -> bytes:
        """下发注册随机数"""
        return self.rng.bytes(16)

    def register_user(self, source: str, challenge: RegistrationChallenge, tick: int) -> str:
        """注册新假名：令牌必须有效且来源未超过限流"""
        if challenge.source != source or not HashUtils.verify_pow(
                challenge.payload, challenge.counter, self.tracing.pow_difficulty_bits):
            self.limiter.record_attempt(source, tick, granted=False, reason="challenge_failed")
            self.db.commit()
            raise ChallengeFailedException(f"来源 {source} 的注册令牌无效")

        passed, info = self.limiter.check_source_rate_limit(
            source, self.tracing.registration_limit_per_source, tick
        )
        if not passed:
            self.limiter.record_attempt(source, tick, granted=False, reason="rate_limited")
            self.db.commit()
            raise RateLimitExceededException(
                f"来源 {source} 已注册 {info['current_count']} 个账号，超过上限 {info['limit']}"
            )

        pseudonym = self.rng.bytes(16).hex()
        row = Pseudonym(pseudonym=pseudonym, source=source, registered_tick=tick)
        self.db.add(row)
        self.limiter.record_attempt(source, tick, granted=True, reason="ok")
        self.db.commit()
        self._pseudonym_ids[pseudonym] = row.id
        return pseudonym

    def pseudonym_id(self, pseudonym: str) -> int:
        pseudonym_id = self._pseudonym_ids.get(pseudonym)
        if pseudonym_id is None:
            row = self.db.query(Pseudonym.id).filter(Pseudonym.pseudonym == pseudonym).first()
            if row is None:
                raise UnknownPseudonymException(f"假名不存在: {pseudonym}")
            pseudonym_id = row[0]
            self._pseudonym_ids[pseudonym] = pseudonym_id
        return pseudonym_id

    def issue_ids(self, pseudonym: str, day_index: int) -> List[EphemeralId]:
        """签发某个假名某一天的96个标识；同一 (假名, 天) 重复请求返回同一组"""
        pseudonym_id = self.pseudonym_id(pseudonym)
        existing = self.db.query(IssuedId.eid).filter(
            IssuedId.pseudonym_id == pseudonym_id, IssuedId.day_index == day_index
        ).order_by(IssuedId.interval_number).all()
        if existing:
            return [EphemeralId(row[0]) for row in existing]

        blob = self.rng.bytes(EID_BYTES * INTERVALS_PER_DAY)
        eids = [EphemeralId(blob[i * EID_BYTES:(i + 1) * EID_BYTES]) for i in range(INTERVALS_PER_DAY)]
        base = day_index * INTERVALS_PER_DAY
        self.db.execute(insert(IssuedId), [
            {"eid": eid, "pseudonym_id": pseudonym_id, "day_index": day_index, "interval_number": base + i}
            for i, eid in enumerate(eids)
        ])
        self.db.commit()
        return eids

    def resolve_eids(self, eids: Iterable[bytes]) -> Dict[bytes, Tuple[int, int]]:
        """标识 -> (假名编号, 绝对时间片序号)；未签发的标识不出现在结果里"""
        wanted = sorted(set(eids))
        resolved: Dict[bytes, Tuple[int, int]] = {}
        for chunk in _chunks(wanted):
            rows = self.db.execute(
                select(IssuedId.eid, IssuedId.pseudonym_id, IssuedId.interval_number).where(IssuedId.eid.in_(chunk))
            ).all()
            for eid, pseudonym_id, interval_number in rows:
                resolved[eid] = (pseudonym_id, interval_number)
        return resolved

    def prune_issued(self, now: SimClock) -> int:
        """删除超过保留期的签发记录"""
        oldest_day = now.day_index - RETENTION_DAYS
        deleted = self.db.query(IssuedId).filter(IssuedId.day_index < oldest_day).delete()
        self.db.commit()
        return deleted

    # ---- 上报与匹配 ----

    def report_diagnosis_central(self, device: DeviceState, now: SimClock) -> DiagnosisReport:
        """确诊者上传收到的标识；服务端解析到假名并更新暴露状态"""
        if device.reported:
            raise DuplicateReportException(f"agent {device.owner} 已经上报过")
        reporter_id = self.pseudonym_id(device.pseudonym) if device.pseudonym else None
        if reporter_id is not None and self.db.query(DiagnosisReport.id).filter(
                DiagnosisReport.reporter_pseudonym_id == reporter_id).first() is not None:
            raise DuplicateReportException(f"假名 {device.pseudonym} 已经上报过")

        oldest_day = now.day_index - (RETENTION_DAYS - 1)
        records = [
            record for eid, record in sorted(device.received.items())
            if record.last_tick * now.step_seconds // SECONDS_PER_DAY >= oldest_day
        ]
        blacklist = load_blacklist(self.db)
        resolved = self.resolve_eids(record.eid for record in records if record.eid not in blacklist)

        report = DiagnosisReport(reporter_pseudonym_id=reporter_id, uploaded_tick=now.tick)
        self.db.add(report)
        self.db.flush()

        unresolved = 0
        per_contact: Dict[int, List[ContactRecord]] = {}
        for record in records:
            if record.eid in blacklist:
                continue
            match = resolved.get(record.eid)
            if match is None:
                unresolved += 1
                continue
            contacted_id, interval_number = match
            if contacted_id == reporter_id:
                continue
            start_tick, end_tick = validity_window(interval_number, self.tracing, self.step_seconds)
            valid = record.restricted(start_tick, end_tick)
            if valid is None:
                unresolved += 1
                continue
            per_contact.setdefault(contacted_id, []).append(valid)

        step_minutes = now.step_seconds / 60.0
        flagged = 0
        evidence = []
        for contacted_id in sorted(per_contact):
            contact_records = per_contact[contacted_id]
            evidence.extend(
                {"report_id": report.id, "reporter_pseudonym_id": reporter_id, "contacted_pseudonym_id": contacted_id,
                 "eid": record.eid, "first_tick": record.first_tick, "last_tick": record.last_tick,
                 "risk_minutes": compute_risk([record], self.tracing, self.radio, step_minutes)}
                for record in contact_records
            )
            risk = compute_risk(contact_records, self.tracing, self.radio, step_minutes)
            if self._update_exposure(contacted_id, risk, report.id, now.tick):
                flagged += 1
            self._scoring_records.setdefault(contacted_id, []).extend(contact_records)

        if evidence:
            self.db.execute(insert(ContactEvidence), evidence)
        report.unresolved_count = unresolved
        report.flagged_count = flagged
        self.db.commit()
        device.reported = True
        device.report_tick = now.tick
        logger.info(
            f"Agent {device.owner} reported {len(records)} received ids at tick {now.tick}: "
            f"{len(per_contact)} pseudonyms matched, {flagged} flagged, {unresolved} unresolved"
        )
        return report

    def _update_exposure(self, pseudonym_id: int, risk: float, report_id: int, tick: int) -> bool:
        """累加风险；首次达到阈值时标记，返回是否由本次上报标记"""
        status = self.db.get(ExposureStatus, pseudonym_id)
        if status is None:
            status = ExposureStatus(pseudonym_id=pseudonym_id, risk_minutes=0.0, held=False,
                                    last_report_id=report_id, last_report_tick=tick)
            self.db.add(status)
        status.risk_minutes = (status.risk_minutes or 0.0) + risk
        status.last_report_id = report_id
        status.last_report_tick = tick
        if status.flagged_tick is None and is_exposed(status.risk_minutes, self.tracing):
            status.flagged_tick = tick
            status.flagged_report_id = report_id
            return True
        return False

    # ---- 监管 ----

    def detect_mass_notification(self, now: SimClock, window_ticks: Optional[int] = None) -> List[OversightAlert]:
        """单次上报标记的假名数超过阈值时告警，并按策略扣留通知"""
        window = window_ticks if window_ticks is not None else SECONDS_PER_DAY // now.step_seconds
        alerted = select(OversightAlert.report_id)
        reports = self.db.query(DiagnosisReport).filter(
            DiagnosisReport.uploaded_tick > now.tick - window,
            DiagnosisReport.flagged_count > self.tracing.fanout_threshold,
            DiagnosisReport.id.not_in(alerted),
        ).order_by(DiagnosisReport.id).all()

        alerts = []
        for report in reports:
            statuses = self.db.query(ExposureStatus).filter(
                ExposureStatus.flagged_report_id == report.id,
                ExposureStatus.notified_tick.is_(None),
            ).order_by(ExposureStatus.pseudonym_id).all()
            if self.tracing.hold_scope == HoldScope.EXCESS:
                to_hold = statuses[self.tracing.fanout_threshold:]
            else:
                to_hold = statuses
            release_tick = None
            if self.tracing.oversight_policy == OversightPolicy.RELEASE:
                release_tick = now.tick + math.ceil(self.tracing.review_delay_s / now.step_seconds)
            for status in to_hold:
                status.held = True
                status.release_tick = release_tick
            alert = OversightAlert(report_id=report.id, raised_tick=now.tick,
                                   fanout=report.flagged_count, held_count=len(to_hold))
            self.db.add(alert)
            alerts.append(alert)
            logger.warning(
                f"Mass notification alert: report {report.id} flagged {report.flagged_count} pseudonyms "
                f"(threshold {self.tracing.fanout_threshold}), {len(to_hold)} held"
            )
        if alerts:
            self.db.commit()
            self._deliverable = (-1, {})
        return alerts

    # ---- 轮询 ----

    def _deliverable_statuses(self, tick: int) -> Dict[int, ExposureStatus]:
        """本tick可投递的状态（同一tick内所有设备共享一次查询）"""
        cached_tick, cached = self._deliverable
        if cached_tick == tick:
            return cached
        rows = self.db.query(ExposureStatus).filter(
            ExposureStatus.flagged_tick.is_not(None),
            ExposureStatus.notified_tick.is_(None),
        ).all()
        deliverable = {}
        for status in rows:
            if status.held and (status.release_tick is None or status.release_tick > tick):
                continue
            deliverable[status.pseudonym_id] = status
        self._deliverable = (tick, deliverable)
        return deliverable

    def poll_status(self, device: DeviceState, now: SimClock) -> Optional[ExposureNotification]:
        """设备轮询自己的暴露状态"""
        if device.pseudonym is None or device.notified:
            return None
        pseudonym_id = self.pseudonym_id(device.pseudonym)
        status = self._deliverable_statuses(now.tick).get(pseudonym_id)
        if status is None:
            return None
        status.notified_tick = now.tick
        self.db.commit()
        device.notified = True
        step_minutes = now.step_seconds / 60.0
        records = self._scoring_records.get(pseudonym_id, [])
        notification = ExposureNotification(
            agent_id=device.owner,
            trigger_tick=now.tick,
            risk_score=float(status.risk_minutes),
            protocol=PROTOCOL_NAME,
            cause=attribute_cause(records, self.tracing, self.radio, step_minutes),
            report_tick=status.last_report_tick,
        )
        return notification

    # ---- 辅助信道 ----

    def record_location_observations(self, observations: List[Tuple[bytes, int, float, float]]) -> int:
        """服务端运营嗅探器时，把 (标识, tick, x, y) 解析到假名后存档"""
        resolved = self.resolve_eids(eid for eid, _, _, _ in observations)
        rows = [
            {"pseudonym_id": resolved[eid][0], "tick": tick, "x": x, "y": y}
            for eid, tick, x, y in observations if eid in resolved
        ]
        if rows:
            self.db.execute(insert(LocationObservation), rows)
            self.db.commit()
        return len(rows)

    def held_count(self) -> int:
        return self.db.query(ExposureStatus).filter(
            ExposureStatus.held.is_(True), ExposureStatus.notified_tick.is_(None)
        ).count()

    def rejected_registrations(self, source: Optional[str] = None) -> Dict[str, int]:
        query = self.db.query(RegistrationAttempt)
        if source is not None:
            query = query.filter(RegistrationAttempt.source == source)
        counts = {"granted": 0, "rate_limited": 0, "challenge_failed": 0}
        for attempt in query.all():
            counts["granted" if attempt.granted else attempt.reason] += 1
        return counts
