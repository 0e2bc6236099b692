from sqlalchemy import Column, Integer, String, Float, Boolean, LargeBinary, ForeignKey, Index
from app.core.database import Base


class Pseudonym(Base):
    """中心化方案的长期假名"""
    __tablename__ = "pseudonyms"

    id = Column(Integer, primary_key=True, autoincrement=True)
    pseudonym = Column(String(32), nullable=False, unique=True, comment="假名（十六进制）")
    source = Column(String(64), nullable=False, comment="注册来源")
    registered_tick = Column(Integer, nullable=False, comment="注册时刻")

    def __repr__(self):
        return f"<Pseudonym(id={self.id}, pseudonym='{self.pseudonym}')>"


class IssuedId(Base):
    """服务端签发的临时标识，与假名一一关联"""
    __tablename__ = "issued_ids"

    eid = Column(LargeBinary(16), primary_key=True, comment="临时标识")
    pseudonym_id = Column(Integer, ForeignKey("pseudonyms.id"), nullable=False)
    day_index = Column(Integer, nullable=False, comment="签发日")
    interval_number = Column(Integer, nullable=False, comment="绝对时间片序号")

    __table_args__ = (
        Index('idx_issued_pseudonym_day', 'pseudonym_id', 'day_index'),
    )


class DiagnosisReport(Base):
    """诊断上报记录（两种方案都会产生，是健康状态台账的来源）"""
    __tablename__ = "diagnosis_reports"

    id = Column(Integer, primary_key=True, autoincrement=True)
    reporter_pseudonym_id = Column(Integer, ForeignKey("pseudonyms.id"), nullable=True,
                                   comment="上报者假名，去中心化方案为空")
    uploaded_tick = Column(Integer, nullable=False, comment="上报时刻")
    unresolved_count = Column(Integer, nullable=False, default=0, comment="无法解析的标识数")
    flagged_count = Column(Integer, nullable=False, default=0, comment="本次上报新标记的假名数")


class UploadedKey(Base):
    """去中心化方案上传的诊断密钥"""
    __tablename__ = "uploaded_keys"

    id = Column(Integer, primary_key=True, autoincrement=True)
    report_id = Column(Integer, ForeignKey("diagnosis_reports.id"), nullable=False)
    key_bytes = Column(LargeBinary(16), nullable=False)
    day_index = Column(Integer, nullable=False)
    uploaded_tick = Column(Integer, nullable=False)
    published_tick = Column(Integer, nullable=True, comment="随批次发布的时刻")

    __table_args__ = (
        Index('idx_uploaded_unpublished', 'published_tick'),
    )


class ContactEvidence(Base):
    """中心化方案：感染者上报的接触证据（社交图的一条边）"""
    __tablename__ = "contact_evidence"

    id = Column(Integer, primary_key=True, autoincrement=True)
    report_id = Column(Integer, ForeignKey("diagnosis_reports.id"), nullable=False)
    reporter_pseudonym_id = Column(Integer, ForeignKey("pseudonyms.id"), nullable=False)
    contacted_pseudonym_id = Column(Integer, ForeignKey("pseudonyms.id"), nullable=False)
    eid = Column(LargeBinary(16), nullable=False)
    first_tick = Column(Integer, nullable=False)
    last_tick = Column(Integer, nullable=False)
    risk_minutes = Column(Float, nullable=False, default=0.0)

    __table_args__ = (
        Index('idx_evidence_contacted', 'contacted_pseudonym_id'),
        Index('idx_evidence_report', 'report_id'),
    )


class ExposureStatus(Base):
    """假名的暴露状态（由服务端维护，用户轮询查询）"""
    __tablename__ = "exposure_status"

    pseudonym_id = Column(Integer, ForeignKey("pseudonyms.id"), primary_key=True)
    risk_minutes = Column(Float, nullable=False, default=0.0)
    flagged_tick = Column(Integer, nullable=True, comment="风险达到阈值的时刻")
    flagged_report_id = Column(Integer, ForeignKey("diagnosis_reports.id"), nullable=True)
    last_report_id = Column(Integer, ForeignKey("diagnosis_reports.id"), nullable=False)
    last_report_tick = Column(Integer, nullable=False)
    notified_tick = Column(Integer, nullable=True)
    held = Column(Boolean, nullable=False, default=False, comment="被监管扣留")
    release_tick = Column(Integer, nullable=True, comment="审核放行时刻")


class RegistrationAttempt(Base):
    """注册请求记录（限流计数来源）"""
    __tablename__ = "registration_attempts"

    id = Column(Integer, primary_key=True, autoincrement=True)
    source = Column(String(64), nullable=False, index=True)
    tick = Column(Integer, nullable=False)
    granted = Column(Boolean, nullable=False)
    reason = Column(String(32), nullable=False)


class OversightAlert(Base):
    """大规模通知告警"""
    __tablename__ = "oversight_alerts"

    id = Column(Integer, primary_key=True, autoincrement=True)
    report_id = Column(Integer, ForeignKey("diagnosis_reports.id"), nullable=False, unique=True)
    raised_tick = Column(Integer, nullable=False)
    fanout = Column(Integer, nullable=False)
    held_count = Column(Integer, nullable=False)


class BlacklistedId(Base):
    """不参与匹配的临时标识黑名单"""
    __tablename__ = "blacklisted_ids"

    eid = Column(LargeBinary(16), primary_key=True)
    added_tick = Column(Integer, nullable=False)


class LocationObservation(Base):
    """服务端借助辅助信道（嗅探器）关联到假名的位置观测"""
    __tablename__ = "location_observations"

    id = Column(Integer, primary_key=True, autoincrement=True)
    pseudonym_id = Column(Integer, ForeignKey("pseudonyms.id"), nullable=False)
    tick = Column(Integer, nullable=False)
    x = Column(Float, nullable=False)
    y = Column(Float, nullable=False)
