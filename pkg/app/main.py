import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from app.core.config import settings
from app.api.commands import compare_command, run_command, validate_command


def setup_logging() -> None:
    """配置日志（只调用一次）"""
    if settings.LOG_FILE:
        Path(settings.LOG_FILE).parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(settings.LOG_FILE) if settings.LOG_FILE else logging.NullHandler()
        ]
    )


logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser, scenario_required: bool = True) -> None:
    parser.add_argument("--scenario", required=scenario_required, help="场景文件 (.cfg)")
    parser.add_argument("--seed", type=int, help="单个种子，覆盖 rng_seed")
    parser.add_argument("--seeds", help="种子范围，如 1..20 或 1,2,3")
    parser.add_argument("--out", help=f"输出目录（缺省 {settings.OUTPUT_ROOT}/<场景名>，必须不存在或为空）")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="覆盖场景中的点号键，可重复")
    parser.add_argument("--protocol", choices=["decentralised", "centralised"], help="覆盖场景的协议")
    parser.add_argument("--blacklist", help="标识黑名单文件（每行一个十六进制标识）")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracesim",
        description=f"{settings.APP_NAME} {settings.APP_VERSION}：比较中心化与去中心化的蓝牙接触追踪",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="运行场景、种子范围或扫参")
    _add_common(run_parser)
    run_parser.add_argument("--sweep", action="append", metavar="KEY=V1,V2", help="扫参，多个取笛卡尔积")
    run_parser.set_defaults(handler=run_command)

    compare_parser = commands.add_parser("compare", help="同一种子下成对运行并写出 comparison.csv")
    _add_common(compare_parser)
    compare_parser.add_argument("--against", help="另一个场景文件；缺省时用两种协议各跑一次")
    compare_parser.set_defaults(handler=compare_command)

    validate_parser = commands.add_parser("validate", help="校验场景文件或 report.json")
    _add_common(validate_parser, scenario_required=False)
    validate_parser.add_argument("--report", help="要校验的 report.json")
    validate_parser.add_argument("--print-schema", action="store_true", help="输出 report.json 的JSON Schema")
    validate_parser.set_defaults(handler=validate_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.handler(args)
    except Exception:
        logger.error(f"Unhandled exception in command '{args.command}'", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
