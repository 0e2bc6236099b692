"""
运行指标：真值暴露集合、通知混淆计数、延迟分布、隐私台账和两种协议的对照表
"""
from sqlalchemy import func, select
from sqlalchemy.orm import Session
from app.core.constants import RETENTION_DAYS
from app.core.exceptions import ScenarioMismatchException
from app.models.server import ContactEvidence, DiagnosisReport, LocationObservation, Pseudonym, UploadedKey
from app.schemas.report import (
    AttackReport, ComparisonRow, ConfusionCounts, EpidemicSummary, LatencyStats,
    OversightSummary, PrivacyLedger, RunMetrics, RunReport
)
from app.services.contacts import RELAY_ATTACK, REPLAY_ATTACK, ExposureNotification
from typing import Dict, List, Sequence, Set, TYPE_CHECKING
import numpy as np
import logging

if TYPE_CHECKING:
    from app.services.simulation import SimulationResult

logger = logging.getLogger(__name__)

ATTACK_CAUSES = {RELAY_ATTACK, REPLAY_ATTACK}


def measure_ledger(db: Session) -> Dict[str, int]:
    """从服务端数据库实际计数，不做任何推断"""
    pairs = select(ContactEvidence.reporter_pseudonym_id, ContactEvidence.contacted_pseudonym_id).distinct()
    social_edges = db.execute(select(func.count()).select_from(pairs.subquery())).scalar_one()
    return {
        "server_health_entries": db.query(DiagnosisReport).count(),
        "server_social_edges": int(social_edges),
        "uploaded_keys": db.query(UploadedKey).count(),
        "pseudonyms": db.query(Pseudonym).count(),
        "location_observations": db.query(LocationObservation).count(),
    }


def contact_minutes(result: "SimulationResult") -> Dict[int, Dict[int, float]]:
    """上报者 -> {接触者: 计入风险的接触分钟数}

    只计上报时刻之前、且在上报日往前14天窗口内的接触，接触双方都必须安装应用。
    """
    config = result.config
    ticks_per_day = config.ticks_per_day
    ticks, first, second, _ = result.contacts.arrays()
    adopters = np.zeros(config.n_agents, dtype=bool)
    adopters[result.adopters] = True

    minutes: Dict[int, Dict[int, float]] = {}
    for reporter, report_tick in sorted(result.report_ticks.items()):
        oldest_day = report_tick // ticks_per_day - (RETENTION_DAYS - 1)
        in_window = (ticks <= report_tick) & (ticks // ticks_per_day >= oldest_day)
        involved = in_window & ((first == reporter) | (second == reporter))
        others = np.where(first[involved] == reporter, second[involved], first[involved])
        others = others[adopters[others]]
        contacted, counts = np.unique(others, return_counts=True)
        minutes[reporter] = {
            int(agent): float(count) * config.step_minutes for agent, count in zip(contacted, counts)
        }
    return minutes


def ground_truth_exposed(result: "SimulationResult") -> Set[int]:
    """应当收到通知的人：来自全部上报者的接触分钟数之和达到阈值"""
    threshold = result.config.tracing.exposure_minutes_threshold
    totals: Dict[int, float] = {}
    for per_contact in contact_minutes(result).values():
        for agent, value in per_contact.items():
            totals[agent] = totals.get(agent, 0.0) + value
    return {agent for agent, total in totals.items() if total > 0 and total >= threshold}


def score_notifications(notifications: Sequence[ExposureNotification], exposed: Set[int]) -> ConfusionCounts:
    """TP = 已通知且确实暴露；FP = 已通知但未暴露（按攻击/噪声细分）；FN = 暴露却未通知"""
    notified = {n.agent_id: n for n in notifications}
    counts = ConfusionCounts(ground_truth_exposed=len(exposed))
    for agent_id, notification in sorted(notified.items()):
        if agent_id in exposed:
            counts.true_positive += 1
        elif notification.cause in ATTACK_CAUSES:
            counts.false_positive_attack += 1
        else:
            counts.false_positive_noise += 1
    counts.false_positive = counts.false_positive_attack + counts.false_positive_noise
    counts.false_negative = len(exposed - set(notified))
    return counts


def notification_latencies(notifications: Sequence[ExposureNotification]) -> List[int]:
    return [n.trigger_tick - n.report_tick for n in notifications if n.report_tick is not None]


def latency_stats(latencies: Sequence[int], step_minutes: float) -> LatencyStats:
    if not latencies:
        return LatencyStats()
    values = np.asarray(latencies, dtype=float)
    median = float(np.median(values))
    return LatencyStats(
        count=len(values),
        min_ticks=int(values.min()),
        median_ticks=median,
        mean_ticks=float(values.mean()),
        p90_ticks=float(np.percentile(values, 90)),
        max_ticks=int(values.max()),
        median_minutes=median * step_minutes,
    )


def build_run_metrics(result: "SimulationResult") -> RunMetrics:
    config = result.config
    exposed = ground_truth_exposed(result)
    n_agents = config.n_agents
    return RunMetrics(
        protocol=config.protocol.value,
        notifications_total=len(result.notifications),
        notifications=score_notifications(result.notifications, exposed),
        latency=latency_stats(notification_latencies(result.notifications), config.step_minutes),
        epidemic=EpidemicSummary(
            attack_rate=result.ever_infected / n_agents if n_agents else 0.0,
            ever_infected=result.ever_infected,
            peak_infectious=result.peak_infectious,
            diagnosed=len(result.diagnoses),
            reported=len(result.report_ticks),
            quarantine_person_days=result.quarantine_person_days,
        ),
        privacy_ledger=PrivacyLedger(**result.ledger),
        oversight=OversightSummary(**result.oversight),
    )


def build_attack_report(result: "SimulationResult") -> AttackReport:
    """把各攻击的明细汇总成一份报告"""
    outcome = dict(result.attack or {})
    sniffer = outcome.get("sniffer") or {}
    relay = outcome.get("relay") or {}
    sybil = outcome.get("sybil") or {}
    return AttackReport(
        attack_types=outcome.get("attack_types", []),
        injected_receptions=relay.get("injected_receptions", 0),
        attack_notifications=relay.get("attack_notifications", 0),
        oversight_alerts=outcome.get("oversight_alerts", 0),
        reidentified_victims=sybil.get("reidentified_victims", []),
        track_coverage_per_victim=sniffer.get("track_coverage_per_victim", {}),
        sniffer=outcome.get("sniffer"),
        relay=outcome.get("relay"),
        sybil=outcome.get("sybil"),
    )


# 对照表的行：(指标名, 从RunMetrics取值)
COMPARISON_METRICS = [
    ("true_positive", lambda m: m.notifications.true_positive),
    ("false_positive", lambda m: m.notifications.false_positive),
    ("false_positive_attack", lambda m: m.notifications.false_positive_attack),
    ("false_negative", lambda m: m.notifications.false_negative),
    ("latency_median_ticks", lambda m: m.latency.median_ticks),
    ("latency_median_minutes", lambda m: m.latency.median_minutes),
    ("latency_max_ticks", lambda m: m.latency.max_ticks),
    ("server_health_entries", lambda m: m.privacy_ledger.server_health_entries),
    ("server_social_edges", lambda m: m.privacy_ledger.server_social_edges),
    ("sniffer_track_coverage", lambda m: m.privacy_ledger.sniffer_track_coverage),
    ("location_observations", lambda m: m.privacy_ledger.location_observations),
    ("oversight_alerts", lambda m: m.oversight.alerts),
    ("held_notifications", lambda m: m.oversight.held_notifications),
    ("attack_rate", lambda m: m.epidemic.attack_rate),
    ("quarantine_person_days", lambda m: m.epidemic.quarantine_person_days),
]


def _scenario_without_protocol(report: RunReport) -> dict:
    config = dict(report.manifest.config)
    config.pop("protocol", None)
    config.pop("name", None)
    return config


def compare_protocols(run_a: RunReport, run_b: RunReport) -> List[ComparisonRow]:
    """同一种子、同一场景（协议除外）的两次运行逐项对照"""
    if run_a.manifest.seed != run_b.manifest.seed:
        raise ScenarioMismatchException(
            f"种子不同: {run_a.manifest.seed} != {run_b.manifest.seed}"
        )
    config_a = _scenario_without_protocol(run_a)
    config_b = _scenario_without_protocol(run_b)
    if config_a != config_b:
        differing = sorted(k for k in set(config_a) | set(config_b) if config_a.get(k) != config_b.get(k))
        raise ScenarioMismatchException(f"场景不同: {', '.join(differing)}")

    rows = []
    for name, getter in COMPARISON_METRICS:
        value_a, value_b = getter(run_a.metrics), getter(run_b.metrics)
        rows.append(ComparisonRow(
            metric=name,
            run_a=None if value_a is None else float(value_a),
            run_b=None if value_b is None else float(value_b),
        ))
    logger.info(f"Compared {run_a.manifest.run_id} against {run_b.manifest.run_id}")
    return rows
