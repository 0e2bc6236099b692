"""
命令处理：run / compare / validate
领域异常在这里翻译成进程退出码（对应Web服务里的HTTP状态码）。
"""
import argparse
import sys
from app.core.exceptions import ConfigParseException, SimulationException
from app.schemas.report import report_json_schema
from app.services.runner import RunSpec, compare, run, validate_report
from app.services.scenario_loader import load_scenario, parse_overrides
from app.utils.helpers import JsonUtils, ParseUtils
from typing import List
import logging

logger = logging.getLogger(__name__)

EXIT_OK = 0


def _spec_from_args(args: argparse.Namespace) -> RunSpec:
    seeds: List[int] = []
    try:
        if args.seeds:
            seeds = ParseUtils.parse_seed_range(args.seeds)
        elif args.seed is not None:
            seeds = [args.seed]
    except ValueError as e:
        raise ConfigParseException(f"--seeds: {e}")
    return RunSpec(
        scenario_path=args.scenario,
        seeds=seeds,
        out_dir=args.out,
        overrides=parse_overrides(args.set or []),
        sweeps=list(getattr(args, "sweep", None) or []),
        protocol=args.protocol,
        blacklist_file=args.blacklist,
    )


def _fail(e: SimulationException) -> int:
    logger.error(f"{type(e).__name__}: {e.detail}")
    print(f"error: {e.detail}", file=sys.stderr)
    return e.exit_code


def run_command(args: argparse.Namespace) -> int:
    """运行场景（可带种子范围和扫参）"""
    try:
        reports = run(_spec_from_args(args))
    except SimulationException as e:
        return _fail(e)
    for report in reports:
        metrics = report.metrics
        print(
            f"{report.manifest.run_id}: notifications={metrics.notifications_total} "
            f"TP={metrics.notifications.true_positive} FP={metrics.notifications.false_positive} "
            f"FN={metrics.notifications.false_negative}"
        )
    return EXIT_OK


def compare_command(args: argparse.Namespace) -> int:
    """成对运行并写出 comparison.csv"""
    try:
        reports = compare(_spec_from_args(args), against=args.against)
    except SimulationException as e:
        return _fail(e)
    print(" vs ".join(report.manifest.run_id for report in reports))
    return EXIT_OK


def validate_command(args: argparse.Namespace) -> int:
    """校验场景文件或报告；--print-schema 输出 report.json 的JSON Schema"""
    if args.print_schema:
        sys.stdout.write(JsonUtils.dumps_stable(report_json_schema()))
        return EXIT_OK
    try:
        if args.report:
            report = validate_report(args.report)
            print(f"report ok: {report.manifest.run_id}")
        if args.scenario:
            spec = _spec_from_args(args)
            overrides = dict(spec.overrides)
            if spec.protocol:
                overrides["protocol"] = spec.protocol
            config = load_scenario(spec.scenario_path, overrides)
            print(f"scenario ok: {config.name} ({config.total_ticks} ticks, protocol={config.protocol.value})")
        if not args.report and not args.scenario:
            raise ConfigParseException("validate 需要 --scenario、--report 或 --print-schema")
    except SimulationException as e:
        return _fail(e)
    return EXIT_OK
