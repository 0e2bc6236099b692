"""
运行结果落盘：CSV时间序列与日志、JSON报告；同样的输入总是产生逐字节相同的文件
"""
from app.core.exceptions import ReportWriteException
from app.schemas.report import ComparisonRow, RunManifest, RunReport
from app.services.metrics import build_attack_report, build_run_metrics
from app.services.simulation import TIMESERIES_HEADER, SimulationResult
from app.utils.helpers import CsvUtils, JsonUtils
from pathlib import Path
from typing import Dict, List, Sequence
import logging

logger = logging.getLogger(__name__)

NOTIFICATIONS_HEADER = ("tick", "agent_id", "protocol", "risk_score", "cause", "report_tick", "latency_ticks")
DIAGNOSES_HEADER = ("tick", "agent_id", "has_app", "reported")
CONTACTS_HEADER = ("tick", "agent_a", "agent_b", "distance_m")
RECEPTIONS_HEADER = ("tick", "receiver_agent", "sender_eid_hex", "rssi_db", "cause")
TRAJECTORIES_HEADER = ("tick", "agent_id", "x", "y")

SUMMARY_HEADER = (
    "run_id", "protocol", "seed", "sweep_key", "sweep_value", "attack_rate", "notifications",
    "true_positive", "false_positive", "false_negative", "latency_median_ticks",
    "server_health_entries", "server_social_edges",
)


def _planned_outputs(result: SimulationResult) -> List[str]:
    names = ["manifest.json", "report.json", "timeseries.csv", "notifications.csv", "diagnoses.csv", "ledger.json"]
    output = result.config.output
    if output.contacts_csv:
        names.append("contacts.csv")
    if output.receptions_csv:
        names.append("receptions.csv")
    if output.trajectories_csv:
        names.append("trajectories.csv")
    if result.attack is not None:
        names.append("attack_report.json")
    if result.captured_eids:
        names.append("captured_eids.txt")
    return sorted(names)


def _write_logs(result: SimulationResult, out_dir: Path) -> None:
    CsvUtils.write_rows(out_dir / "timeseries.csv", TIMESERIES_HEADER, result.timeseries)
    CsvUtils.write_rows(out_dir / "notifications.csv", NOTIFICATIONS_HEADER, (
        (n.trigger_tick, n.agent_id, n.protocol, float(n.risk_score), n.cause, n.report_tick,
         None if n.report_tick is None else n.trigger_tick - n.report_tick)
        for n in result.notifications
    ))
    CsvUtils.write_rows(out_dir / "diagnoses.csv", DIAGNOSES_HEADER, (
        (d.tick, d.agent_id, d.has_app, d.reported) for d in result.diagnoses
    ))
    output = result.config.output
    if output.contacts_csv:
        ticks, first, second, distance = result.contacts.arrays()
        CsvUtils.write_rows(out_dir / "contacts.csv", CONTACTS_HEADER, (
            (int(t), int(a), int(b), float(d)) for t, a, b, d in zip(ticks, first, second, distance)
        ))
    if output.receptions_csv:
        CsvUtils.write_rows(out_dir / "receptions.csv", RECEPTIONS_HEADER, result.receptions)
    if output.trajectories_csv:
        CsvUtils.write_rows(out_dir / "trajectories.csv", TRAJECTORIES_HEADER, result.trajectories)
    if result.captured_eids:
        (out_dir / "captured_eids.txt").write_text(
            "".join(eid.hex() + "\n" for eid in result.captured_eids), encoding="utf-8"
        )


def emit_report(result: SimulationResult, manifest: RunManifest, out_dir: Path) -> RunReport:
    """写出一次运行的全部文件，返回写入 report.json 的内容"""
    manifest = manifest.model_copy(update={"outputs": _planned_outputs(result)})
    report = RunReport(
        manifest=manifest,
        metrics=build_run_metrics(result),
        attack=build_attack_report(result) if result.attack is not None else None,
    )
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        JsonUtils.write(out_dir / "manifest.json", manifest.model_dump(mode="json"))
        JsonUtils.write(out_dir / "report.json", report.model_dump(mode="json"))
        JsonUtils.write(out_dir / "ledger.json", report.metrics.privacy_ledger.model_dump(mode="json"))
        if report.attack is not None:
            JsonUtils.write(out_dir / "attack_report.json", report.attack.model_dump(mode="json"))
        _write_logs(result, out_dir)
    except OSError as e:
        logger.error(f"Failed to write report to {out_dir}: {e}")
        raise ReportWriteException(f"无法写入 {out_dir}: {e}")
    logger.info(f"Report written to {out_dir}")
    return report


def write_comparison(rows: Sequence[ComparisonRow], labels: Sequence[str], path: Path) -> int:
    """comparison.csv：每行一个指标，两列分别是两次运行"""
    try:
        return CsvUtils.write_rows(path, ("metric", labels[0], labels[1]), (
            (row.metric, row.run_a, row.run_b) for row in rows
        ))
    except OSError as e:
        raise ReportWriteException(f"无法写入 {path}: {e}")


def summary_row(report: RunReport, sweep: Dict[str, str]) -> tuple:
    metrics = report.metrics
    # 多个扫参键以分号连接，顺序与键名排序一致
    key = ";".join(sorted(sweep))
    value = ";".join(sweep[k] for k in sorted(sweep))
    return (
        report.manifest.run_id, metrics.protocol, report.manifest.seed, key, value,
        metrics.epidemic.attack_rate, metrics.notifications_total,
        metrics.notifications.true_positive, metrics.notifications.false_positive,
        metrics.notifications.false_negative, metrics.latency.median_ticks,
        metrics.privacy_ledger.server_health_entries, metrics.privacy_ledger.server_social_edges,
    )


def write_summary(rows: Sequence[tuple], path: Path) -> int:
    """summary.csv：扫参时每次运行一行"""
    try:
        return CsvUtils.write_rows(path, SUMMARY_HEADER, rows)
    except OSError as e:
        raise ReportWriteException(f"无法写入 {path}: {e}")
