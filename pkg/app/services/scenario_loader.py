"""
场景文件加载：`key = value` 行（与 .env 相同的语法），点号键映射到嵌套配置段
"""
from dotenv.parser import parse_stream
from pydantic import ValidationError
from app.core.exceptions import ConfigParseException, ConfigValidationException
from app.schemas.scenario import ScenarioConfig
from app.utils.helpers import ParseUtils
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple
import io
import itertools
import logging

logger = logging.getLogger(__name__)

# 场景键的别名 -> 正式名
KEY_ALIASES = {"adoption": "adoption_fraction"}


def parse_scenario_text(text: str, source: str = "<scenario>") -> Dict[str, str]:
    """解析为扁平的 {点号键: 字符串值}"""
    values: Dict[str, str] = {}
    for binding in parse_stream(io.StringIO(text)):
        if binding.error:
            line = binding.original.line
            raise ConfigParseException(f"{source}:{line}: 无法解析 {binding.original.string.strip()!r}")
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigParseException(f"{source}:{binding.original.line}: 键 {binding.key} 缺少取值")
        values[canonical_key(binding.key)] = binding.value
    return values


def canonical_key(key: str) -> str:
    return KEY_ALIASES.get(key, key)


def nest(flat: Dict[str, str]) -> dict:
    """radio.noise_sigma_db=3 -> {"radio": {"noise_sigma_db": "3"}}"""
    nested: dict = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigParseException(f"键 {dotted} 与 {part} 冲突")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigParseException(f"键 {dotted} 与其子键冲突")
        node[parts[-1]] = value
    return nested


def validate_scenario(flat: Dict[str, str]) -> ScenarioConfig:
    """用pydantic校验；错误信息给出违反约束的点号键"""
    try:
        return ScenarioConfig.model_validate(nest(flat))
    except ValidationError as e:
        error = e.errors()[0]
        field = ".".join(str(part) for part in error["loc"] if not isinstance(part, int)) or "scenario"
        logger.error(f"Scenario validation failed at {field}: {error['msg']}")
        raise ConfigValidationException(f"{field}: {error['msg']}", field=field)


def load_scenario(path: str, overrides: Optional[Dict[str, str]] = None) -> ScenarioConfig:
    """读取场景文件，合并 --set 覆盖项后校验"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseException(f"无法读取场景文件 {path}: {e}")
    flat = parse_scenario_text(text, source=path)
    flat.update({canonical_key(key): value for key, value in (overrides or {}).items()})
    return validate_scenario(flat)


def parse_overrides(assignments: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for text in assignments:
        try:
            key, value = ParseUtils.parse_assignment(text)
        except ValueError as e:
            raise ConfigParseException(str(e))
        overrides[canonical_key(key)] = value
    return overrides


def expand_sweeps(sweeps: Iterable[str]) -> List[Dict[str, str]]:
    """多个 --sweep 取笛卡尔积；没有扫参时返回一个空组合"""
    axes: List[Tuple[str, List[str]]] = []
    for text in sweeps:
        try:
            axes.append(ParseUtils.parse_sweep(text))
        except ValueError as e:
            raise ConfigParseException(str(e))
    if not axes:
        return [{}]
    keys = [canonical_key(key) for key, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(values for _, values in axes))]
