"""
临时标识生命周期：每日诊断密钥、轮换标识的派生与密钥展开

派生方式（版本稳定，修改会使 tests/golden 失效）：
    标识密钥 = HKDF-SHA256(key_bytes, salt=None, info="EN-RPIK", 16字节)
    第d天第i个标识 = AES-128-ECB(标识密钥, "EN-RPI" || 0x00*6 || uint32_le(d*96 + i))
"""
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from app.core.constants import INTERVALS_PER_DAY, KEY_BYTES, RETENTION_SECONDS
from app.core.exceptions import IdentifierRangeException
from app.services.world import SimClock
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, NewType, Optional, TypeVar
import struct
import logging

logger = logging.getLogger(__name__)

EphemeralId = NewType("EphemeralId", bytes)

IDENTIFIER_KEY_INFO = b"EN-RPIK"
IDENTIFIER_PREFIX = b"EN-RPI" + b"\x00" * 6

K = TypeVar("K")
V = TypeVar("V")


@dataclass(frozen=True)
class DiagnosisKey:
    """每台设备每天一个的秘密"""
    day_index: int
    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != KEY_BYTES:
            raise ValueError(f"诊断密钥必须是 {KEY_BYTES} 字节")
        if self.day_index < 0:
            raise ValueError("day_index 不能为负")

    def hex(self) -> str:
        return self.key_bytes.hex()


@lru_cache(maxsize=8192)
def _identifier_key(key_bytes: bytes) -> bytes:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=16, salt=None, info=IDENTIFIER_KEY_INFO)
    return hkdf.derive(key_bytes)


def _interval_block(day_index: int, interval_in_day: int) -> bytes:
    return IDENTIFIER_PREFIX + struct.pack("<I", day_index * INTERVALS_PER_DAY + interval_in_day)


def derive_ephemeral_id(key: DiagnosisKey, interval_in_day: int) -> EphemeralId:
    """由诊断密钥派生某个时间片的临时标识"""
    if not 0 <= interval_in_day < INTERVALS_PER_DAY:
        raise IdentifierRangeException(f"时间片序号越界: {interval_in_day}")
    encryptor = Cipher(algorithms.AES(_identifier_key(key.key_bytes)), modes.ECB()).encryptor()
    block = encryptor.update(_interval_block(key.day_index, interval_in_day)) + encryptor.finalize()
    return EphemeralId(block)


def expand_key(key: DiagnosisKey) -> List[EphemeralId]:
    """把一个诊断密钥展开为当天全部96个标识，第i个等于 derive_ephemeral_id(key, i)"""
    encryptor = Cipher(algorithms.AES(_identifier_key(key.key_bytes)), modes.ECB()).encryptor()
    plaintext = b"".join(_interval_block(key.day_index, i) for i in range(INTERVALS_PER_DAY))
    ciphertext = encryptor.update(plaintext) + encryptor.finalize()
    return [EphemeralId(ciphertext[i * 16:(i + 1) * 16]) for i in range(INTERVALS_PER_DAY)]


def is_expired(tick: int, now: SimClock) -> bool:
    """条目是否已超出14天保留窗口"""
    return (now.tick - tick) * now.step_seconds > RETENTION_SECONDS


def retention_prune(
    store: Mapping[K, V],
    now: SimClock,
    timestamp: Optional[Callable[[V], int]] = None,
) -> Dict[K, V]:
    """删除早于14天的条目，其余保持原顺序

    store 的值默认就是tick；值为记录对象时用 timestamp 取出其时刻。
    """
    timestamp = timestamp or (lambda value: value)  # type: ignore[assignment, return-value]
    return {k: v for k, v in store.items() if not is_expired(timestamp(v), now)}  # type: ignore[misc]


class EidCatalog:
    """运行内的标识驻留表：标识字节 <-> 整数编号"""

    def __init__(self):
        self._index: Dict[bytes, int] = {}
        self._eids: List[EphemeralId] = []

    def intern(self, eid: EphemeralId) -> int:
        index = self._index.get(eid)
        if index is None:
            index = len(self._eids)
            self._index[eid] = index
            self._eids.append(eid)
        return index

    def lookup(self, eid: bytes) -> Optional[int]:
        return self._index.get(eid)

    def eid(self, index: int) -> EphemeralId:
        return self._eids[index]

    def __len__(self) -> int:
        return len(self._eids)
