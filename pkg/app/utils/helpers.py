import hashlib
import json
import csv
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple
import logging

logger = logging.getLogger(__name__)


class HashUtils:
    """哈希工具类"""

    @staticmethod
    def sha256_hex(data: bytes) -> str:
        """生成内容哈希"""
        return hashlib.sha256(data).hexdigest()

    @staticmethod
    def file_digest(path: str) -> str:
        """文件内容的SHA-256"""
        return HashUtils.sha256_hex(Path(path).read_bytes())

    @staticmethod
    def leading_zero_bits(digest: bytes) -> int:
        """摘要开头连续0比特的个数"""
        count = 0
        for byte in digest:
            if byte == 0:
                count += 8
                continue
            count += 8 - byte.bit_length()
            break
        return count

    @staticmethod
    def verify_pow(payload: bytes, counter: int, bits: int) -> bool:
        """验证工作量证明：SHA-256(payload || counter) 至少有 bits 个前导0比特"""
        digest = hashlib.sha256(payload + counter.to_bytes(8, "big")).digest()
        return HashUtils.leading_zero_bits(digest) >= bits

    @staticmethod
    def solve_pow(payload: bytes, bits: int) -> int:
        """求解工作量证明（确定性：从0开始递增计数器）"""
        counter = 0
        while not HashUtils.verify_pow(payload, counter, bits):
            counter += 1
        return counter


class JsonUtils:
    """JSON工具类"""

    @staticmethod
    def dumps_stable(data: Any) -> str:
        """序列化为字节稳定的JSON（键排序、固定缩进、结尾换行）"""
        return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False, default=str) + "\n"

    @staticmethod
    def write(path: Path, data: Any) -> None:
        path.write_text(JsonUtils.dumps_stable(data), encoding="utf-8")

    @staticmethod
    def read(path: Path) -> Any:
        return json.loads(Path(path).read_text(encoding="utf-8"))


class CsvUtils:
    """CSV工具类"""

    @staticmethod
    def format_value(value: Any) -> Any:
        """浮点数固定6位小数，保证输出逐字节稳定"""
        if isinstance(value, float):
            return f"{value:.6f}"
        if isinstance(value, bool):
            return int(value)
        return value

    @staticmethod
    def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
        """写出CSV，返回数据行数"""
        count = 0
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([CsvUtils.format_value(value) for value in row])
                count += 1
        return count

    @staticmethod
    def read_rows(path: Path) -> List[Dict[str, str]]:
        with open(path, newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))


class ParseUtils:
    """命令行参数解析工具类"""

    @staticmethod
    def parse_seed_range(text: str) -> List[int]:
        """解析种子范围，如 1..20 或 1,5,9"""
        text = text.strip()
        if ".." in text:
            start, _, end = text.partition("..")
            first, last = int(start), int(end)
            if last < first:
                raise ValueError(f"种子范围无效: {text}")
            return list(range(first, last + 1))
        return [int(item) for item in text.split(",") if item.strip()]

    @staticmethod
    def parse_assignment(text: str) -> Tuple[str, str]:
        """解析 key=value"""
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"需要 key=value 形式: {text}")
        return key.strip(), value.strip()

    @staticmethod
    def parse_sweep(text: str) -> Tuple[str, List[str]]:
        """解析扫参，如 adoption=0.0,0.4,0.8"""
        key, values = ParseUtils.parse_assignment(text)
        items = [item.strip() for item in values.split(",") if item.strip()]
        if not items:
            raise ValueError(f"扫参没有取值: {text}")
        return key, items

    @staticmethod
    def read_hex_lines(path: str) -> List[bytes]:
        """读取每行一个十六进制值的文件（忽略空行和#注释）"""
        values = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            values.append(bytes.fromhex(line))
        return values
