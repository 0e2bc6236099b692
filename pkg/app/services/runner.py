"""
运行编排：单次运行、种子/参数扫描、两种协议的成对比较
"""
from concurrent.futures import ProcessPoolExecutor
from pydantic import ValidationError
from app.core.config import settings
from app.core.exceptions import (
    ConfigParseException, ConfigValidationException, OutputDirectoryException, ScenarioMismatchException
)
from app.schemas.report import RunManifest, RunReport
from app.schemas.scenario import Protocol, ScenarioConfig
from app.services.metrics import compare_protocols
from app.services.report_writer import emit_report, summary_row, write_comparison, write_summary
from app.services.scenario_loader import expand_sweeps, load_scenario
from app.services.simulation import run_simulation
from app.utils.helpers import HashUtils, JsonUtils, ParseUtils
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple
import time
import logging

logger = logging.getLogger(__name__)


@dataclass
class RunSpec:
    """一次命令行调用描述的运行"""
    scenario_path: str
    seeds: List[int] = field(default_factory=list)
    out_dir: Optional[str] = None
    overrides: Dict[str, str] = field(default_factory=dict)
    sweeps: List[str] = field(default_factory=list)
    protocol: Optional[str] = None
    blacklist_file: Optional[str] = None

    def resolved_out_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(settings.OUTPUT_ROOT) / Path(self.scenario_path).stem


@dataclass
class RunJob:
    """扫描中的单次运行（可以送进子进程）"""
    scenario_path: str
    overrides: Dict[str, str]
    sweep: Dict[str, str]
    out_dir: str
    blacklist_file: Optional[str] = None


def prepare_output_dir(path: Path) -> Path:
    """输出目录必须不存在或为空"""
    if path.exists():
        if not path.is_dir() or any(path.iterdir()):
            raise OutputDirectoryException(f"输出目录已存在且非空: {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _base_overrides(spec: RunSpec, seed: Optional[int]) -> Dict[str, str]:
    overrides = dict(spec.overrides)
    if seed is not None:
        overrides["rng_seed"] = str(seed)
    if spec.protocol:
        overrides["protocol"] = spec.protocol
    return overrides


def make_run_id(config: ScenarioConfig, sweep: Dict[str, str]) -> str:
    suffix = "".join(f"-{key}={value}" for key, value in sorted(sweep.items()))
    return f"{config.name}-{config.protocol.value}-s{config.rng_seed}{suffix}"


def build_manifest(job: RunJob, config: ScenarioConfig) -> RunManifest:
    return RunManifest(
        run_id=make_run_id(config, job.sweep),
        app_version=settings.APP_VERSION,
        scenario_path=job.scenario_path,
        scenario_digest=HashUtils.file_digest(job.scenario_path),
        seed=config.rng_seed,
        protocol=config.protocol.value,
        overrides=dict(sorted(job.overrides.items())),
        blacklist_file=job.blacklist_file,
        blacklist_digest=HashUtils.file_digest(job.blacklist_file) if job.blacklist_file else None,
        total_ticks=config.total_ticks,
        config=config.model_dump(mode="json"),
    )


def execute_job(job: RunJob) -> RunReport:
    """加载、运行并落盘一次运行（进程池的工作函数）"""
    config = load_scenario(job.scenario_path, job.overrides)
    blacklist = ParseUtils.read_hex_lines(job.blacklist_file) if job.blacklist_file else []
    manifest = build_manifest(job, config)
    started = time.perf_counter()
    logger.info(f"Run {manifest.run_id} started (seed={config.rng_seed}, protocol={config.protocol.value})")
    try:
        result = run_simulation(config, blacklist)
        report = emit_report(result, manifest, Path(job.out_dir))
    except Exception as e:
        logger.error(f"Run {manifest.run_id} failed: {e}")
        raise
    logger.info(f"Run {manifest.run_id} completed in {time.perf_counter() - started:.1f}s")
    return report


def _execute_all(jobs: List[RunJob]) -> List[RunReport]:
    workers = max(1, settings.MAX_WORKERS)
    if workers == 1 or len(jobs) == 1:
        return [execute_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute_job, jobs))


def plan_jobs(spec: RunSpec) -> Tuple[Path, List[RunJob]]:
    """展开种子与扫参；多次运行时每次运行一个子目录"""
    out_dir = spec.resolved_out_dir()
    seeds: List[Optional[int]] = list(spec.seeds) or [None]
    combos = expand_sweeps(spec.sweeps)
    jobs = []
    for combo in combos:
        for seed in seeds:
            overrides = _base_overrides(spec, seed)
            overrides.update(combo)
            jobs.append(RunJob(spec.scenario_path, overrides, combo, str(out_dir), spec.blacklist_file))
    if len(jobs) > 1:
        for job in jobs:
            # 先校验，子目录名依赖解析后的配置
            config = load_scenario(job.scenario_path, job.overrides)
            job.out_dir = str(out_dir / make_run_id(config, job.sweep))
    else:
        load_scenario(jobs[0].scenario_path, jobs[0].overrides)
    return out_dir, jobs


def run(spec: RunSpec) -> List[RunReport]:
    """执行 run 命令"""
    out_dir, jobs = plan_jobs(spec)
    prepare_output_dir(out_dir)
    reports = _execute_all(jobs)
    if len(jobs) > 1:
        rows = [summary_row(report, job.sweep) for report, job in zip(reports, jobs)]
        write_summary(rows, out_dir / "summary.csv")
        logger.info(f"Sweep finished: {len(reports)} runs, summary at {out_dir / 'summary.csv'}")
    return reports


def compare(spec: RunSpec, against: Optional[str] = None) -> List[RunReport]:
    """执行 compare 命令：against 为空时同一场景分别用两种协议运行"""
    seed = spec.seeds[0] if spec.seeds else None
    overrides = _base_overrides(spec, seed)
    overrides.pop("protocol", None)
    out_dir = spec.resolved_out_dir()

    if against is None:
        config = load_scenario(spec.scenario_path, overrides)
        first = spec.protocol or config.protocol.value
        second = next(p.value for p in Protocol if p.value != first)
        jobs = [
            RunJob(spec.scenario_path, {**overrides, "protocol": first}, {}, str(out_dir / first),
                   spec.blacklist_file),
            RunJob(spec.scenario_path, {**overrides, "protocol": second}, {}, str(out_dir / second),
                   spec.blacklist_file),
        ]
    else:
        jobs = [
            RunJob(spec.scenario_path, dict(overrides), {}, str(out_dir / "run_a"), spec.blacklist_file),
            RunJob(against, dict(overrides), {}, str(out_dir / "run_b"), spec.blacklist_file),
        ]

    config_a = load_scenario(jobs[0].scenario_path, jobs[0].overrides)
    config_b = load_scenario(jobs[1].scenario_path, jobs[1].overrides)
    if config_a.without_protocol() != config_b.without_protocol():
        a, b = config_a.without_protocol(), config_b.without_protocol()
        differing = sorted(key for key in set(a) | set(b) if a.get(key) != b.get(key))
        raise ScenarioMismatchException(f"场景不同: {', '.join(differing)}")

    prepare_output_dir(out_dir)
    reports = _execute_all(jobs)
    rows = compare_protocols(reports[0], reports[1])
    labels = [report.manifest.protocol for report in reports]
    if labels[0] == labels[1]:
        labels = ["run_a", "run_b"]
    write_comparison(rows, labels, out_dir / "comparison.csv")
    return reports


def validate_report(path: str) -> RunReport:
    """按随程序发布的schema校验 report.json"""
    try:
        return RunReport.model_validate(JsonUtils.read(Path(path)))
    except ValidationError as e:
        error = e.errors()[0]
        field_name = ".".join(str(part) for part in error["loc"]) or "report"
        raise ConfigValidationException(f"{field_name}: {error['msg']}", field=field_name)
    except (OSError, ValueError) as e:
        raise ConfigParseException(f"无法读取报告 {path}: {e}")
