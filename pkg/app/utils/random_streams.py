"""
命名随机子流

一次运行只有一个种子；各模块从同一个种子派生互相独立的子流，
这样加入攻击模块不会扰动移动、疫情或信道的抽样序列。
"""
import numpy as np
from typing import Dict

# 子流编号一旦发布就不能修改，否则同一种子的历史运行无法复现
STREAM_KEYS: Dict[str, int] = {
    "population": 0,
    "mobility": 1,
    "epidemic": 2,
    "radio": 3,
    "attack": 4,
    "consent": 5,
    "quarantine": 6,
    "server": 7,
    "device": 8,
}


def make_generator(seed: int, *spawn_key: int) -> np.random.Generator:
    """由种子和派生路径构造生成器（PCG64DXSM）"""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(spawn_key))
    return np.random.Generator(np.random.PCG64DXSM(sequence))


class RandomStreams:
    """一次运行的全部随机子流"""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """获取命名子流（首次访问时创建）"""
        if name not in self._streams:
            self._streams[name] = make_generator(self.seed, STREAM_KEYS[name])
        return self._streams[name]

    def device_stream(self, agent_id: int) -> np.random.Generator:
        """每台设备独立的密钥子流"""
        return make_generator(self.seed, STREAM_KEYS["device"], agent_id)
