"""
BLE广播接收模型（对数距离路径损耗 + 高斯阴影噪声）
"""
from app.core.constants import MIN_DISTANCE_M
from app.core.exceptions import DistanceDomainException
from app.schemas.scenario import RadioParams
from app.services.identifiers import EphemeralId
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union
import numpy as np
import logging

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class Reception(NamedTuple):
    """一次接收：接收方只知道对方当前的临时标识"""
    receiver: int
    sender_eid: EphemeralId
    tick: int
    rssi_db: float
    # 仅供评分的真值标签：true / relay / replay
    cause: str = "true"


def rssi_from_distance(distance_m: ArrayLike, params: RadioParams, noise_draw: ArrayLike = 0.0) -> ArrayLike:
    """由距离计算信号强度

    noise_draw 是标准正态抽样，按 noise_sigma_db 缩放后叠加。
    """
    distance = np.asarray(distance_m, dtype=float)
    if np.any(distance <= 0):
        raise DistanceDomainException(f"距离必须大于0: {distance_m}")
    rssi = (
        params.rssi_at_1m_db
        - 10.0 * params.path_loss_exponent * np.log10(distance)
        + params.noise_sigma_db * np.asarray(noise_draw, dtype=float)
    )
    return float(rssi) if rssi.ndim == 0 else rssi


def estimate_distance(rssi_db: ArrayLike, params: RadioParams) -> ArrayLike:
    """无噪声路径损耗模型的反函数，结果不小于0.1米"""
    exponent = (params.rssi_at_1m_db - np.asarray(rssi_db, dtype=float)) / (10.0 * params.path_loss_exponent)
    distance = np.maximum(np.power(10.0, exponent), MIN_DISTANCE_M)
    return float(distance) if distance.ndim == 0 else distance


_EMPTY_INDEX = np.zeros(0, dtype=np.int64)
_EMPTY_RSSI = np.zeros(0, dtype=float)


def broadcast_columns(
    distances: np.ndarray,
    eids: Sequence[Optional[EphemeralId]],
    params: RadioParams,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """一轮广播的列式结果：(接收者, 发送者, 信号强度)，均为人的下标

    按 (接收者, 发送者) 升序排列，噪声也按这个顺序抽取，
    因此结果与人群的枚举顺序无关。
    """
    app_ids = np.array([i for i, eid in enumerate(eids) if eid is not None], dtype=np.int64)
    if len(app_ids) < 2:
        return _EMPTY_INDEX, _EMPTY_INDEX, _EMPTY_RSSI

    sub = distances[np.ix_(app_ids, app_ids)]
    in_range = sub <= params.max_range_m
    np.fill_diagonal(in_range, False)
    receivers, senders = np.nonzero(in_range)
    if len(receivers) == 0:
        return _EMPTY_INDEX, _EMPTY_INDEX, _EMPTY_RSSI

    pair_distance = np.maximum(sub[receivers, senders], MIN_DISTANCE_M)
    noise = rng.standard_normal(len(receivers)) if params.noise_sigma_db > 0 else 0.0
    rssi = np.asarray(rssi_from_distance(pair_distance, params, noise), dtype=float)

    heard = rssi >= params.detection_floor_db
    if params.discovery_probability < 1.0:
        heard &= rng.random(len(receivers)) < params.discovery_probability
    return app_ids[receivers[heard]], app_ids[senders[heard]], rssi[heard]


def broadcast_round(
    distances: np.ndarray,
    eids: Sequence[Optional[EphemeralId]],
    params: RadioParams,
    tick: int,
    rng: np.random.Generator,
) -> List[Reception]:
    """一轮广播：返回本tick内所有成功的接收

    eids[i] 为第i个人当前广播的标识，未安装应用者为None。
    """
    receivers, senders, rssi = broadcast_columns(distances, eids, params, rng)
    return [
        Reception(receiver, eids[sender], tick, level)  # type: ignore[arg-type]
        for receiver, sender, level in zip(receivers.tolist(), senders.tolist(), rssi.tolist())
    ]
