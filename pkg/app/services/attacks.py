"""
三种攻击：嗅探网格位置泄露、中继/重放误报、女巫重识别
"""
from app.core.exceptions import ChallengeFailedException, RateLimitExceededException
from app.schemas.scenario import (
    RadioParams, RelayConfig, RelayMode, SnifferConfig, SnifferOperator, SybilConfig
)
from app.services.identifiers import DiagnosisKey, EidCatalog, EphemeralId, expand_key
from app.services.radio import Reception, rssi_from_distance
from app.services.world import World
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple, TYPE_CHECKING
import numpy as np
import logging

if TYPE_CHECKING:
    from app.services.centralised import CentralisedServer

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# 嗅探网格
# ---------------------------------------------------------------------------

class SnifferObservation(NamedTuple):
    """嗅探器记下的 (标识, 嗅探器位置, 时刻)"""
    eid: EphemeralId
    sniffer_pos: Tuple[float, float]
    tick: int


@dataclass
class ObservationLog:
    """列式观测日志；agent 与 agent_x/agent_y 只用于评分，攻击者看不到"""
    ticks: List[np.ndarray] = field(default_factory=list)
    sniffers: List[np.ndarray] = field(default_factory=list)
    eid_indices: List[np.ndarray] = field(default_factory=list)
    agents: List[np.ndarray] = field(default_factory=list)
    agent_xy: List[np.ndarray] = field(default_factory=list)

    def append(self, tick: int, sniffers: np.ndarray, eid_indices: np.ndarray,
               agents: np.ndarray, agent_xy: np.ndarray) -> None:
        self.ticks.append(np.full(len(sniffers), tick, dtype=np.int32))
        self.sniffers.append(sniffers.astype(np.int32))
        self.eid_indices.append(eid_indices.astype(np.int32))
        self.agents.append(agents.astype(np.int32))
        self.agent_xy.append(agent_xy.astype(np.float64))

    def columns(self) -> Dict[str, np.ndarray]:
        if not self.ticks:
            empty = np.zeros(0, dtype=np.int32)
            return {"tick": empty, "sniffer": empty, "eid": empty, "agent": empty,
                    "agent_xy": np.zeros((0, 2))}
        return {
            "tick": np.concatenate(self.ticks),
            "sniffer": np.concatenate(self.sniffers),
            "eid": np.concatenate(self.eid_indices),
            "agent": np.concatenate(self.agents),
            "agent_xy": np.concatenate(self.agent_xy),
        }

    def __len__(self) -> int:
        return int(sum(len(chunk) for chunk in self.ticks))


class SnifferGrid:
    """被动嗅探器阵列：只接收，从不发送，也不改变协议状态"""

    def __init__(self, positions: np.ndarray, range_m: float, detection_probability: float = 1.0,
                 operator: SnifferOperator = SnifferOperator.THIRD_PARTY, ticks_per_day: int = 1440):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        self.range_m = range_m
        self.detection_probability = detection_probability
        self.operator = operator
        self.ticks_per_day = ticks_per_day
        self.log = ObservationLog()
        # 每个人每天处于任一嗅探器范围内的tick数（评分用）
        self.ticks_in_range: Dict[int, Dict[int, int]] = {}

    @classmethod
    def from_config(cls, config: SnifferConfig, width: float, height: float, radio: RadioParams,
                    ticks_per_day: int = 1440) -> "SnifferGrid":
        if config.positions:
            positions = np.array(config.positions, dtype=float)
        else:
            xs = (np.arange(config.grid_cols) + 0.5) * width / config.grid_cols
            ys = (np.arange(config.grid_rows) + 0.5) * height / config.grid_rows
            grid_x, grid_y = np.meshgrid(xs, ys)
            positions = np.column_stack([grid_x.ravel(), grid_y.ravel()])
        range_m = config.range_m or radio.max_range_m
        return cls(positions, range_m, config.detection_probability, config.operator, ticks_per_day)

    def position(self, index: int) -> Tuple[float, float]:
        x, y = self.positions[index]
        return float(x), float(y)


def sniff_round(grid: SnifferGrid, world: World, eids: Sequence[Optional[EphemeralId]], catalog: EidCatalog,
                tick: int, rng: Optional[np.random.Generator] = None) -> List[SnifferObservation]:
    """每个 (嗅探器, 应用用户) 距离在范围内时记一条观测"""
    app_ids = np.array([i for i, eid in enumerate(eids) if eid is not None], dtype=np.int64)
    if len(app_ids) == 0 or len(grid.positions) == 0:
        return []
    points = world.positions[app_ids]
    diff = grid.positions[:, None, :] - points[None, :, :]
    distance = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    in_range = distance <= grid.range_m

    for agent_index in np.flatnonzero(in_range.any(axis=0)):
        agent_id = int(app_ids[agent_index])
        per_day = grid.ticks_in_range.setdefault(agent_id, {})
        day = tick // grid.ticks_per_day
        per_day[day] = per_day.get(day, 0) + 1

    sniffer_idx, agent_idx = np.nonzero(in_range)
    if len(sniffer_idx) and grid.detection_probability < 1.0 and rng is not None:
        detected = rng.random(len(sniffer_idx)) < grid.detection_probability
        sniffer_idx, agent_idx = sniffer_idx[detected], agent_idx[detected]
    if len(sniffer_idx) == 0:
        return []

    observed_agents = app_ids[agent_idx]
    eid_indices = np.array([catalog.intern(eids[a]) for a in observed_agents], dtype=np.int64)  # type: ignore[arg-type]
    grid.log.append(tick, sniffer_idx, eid_indices, observed_agents, world.positions[observed_agents])
    return [
        SnifferObservation(eids[a], grid.position(s), tick)  # type: ignore[arg-type]
        for s, a in zip(sniffer_idx, observed_agents)
    ]


@dataclass
class ReconstructedTrack:
    """由一个公开密钥还原出的轨迹"""
    key_hex: str
    day_index: int
    points: List[Tuple[int, Tuple[float, float]]] = field(default_factory=list)


def reconstruct_tracks(grid: SnifferGrid, published_keys: Sequence[DiagnosisKey],
                       catalog: EidCatalog) -> Dict[str, ReconstructedTrack]:
    """展开公开密钥，与观测日志连接，按tick排序得到每个密钥的轨迹"""
    columns = grid.log.columns()
    tracks: Dict[str, ReconstructedTrack] = {}
    for key in published_keys:
        track = ReconstructedTrack(key_hex=key.hex(), day_index=key.day_index)
        indices = [catalog.lookup(eid) for eid in expand_key(key)]
        wanted = np.array([index for index in indices if index is not None], dtype=np.int64)
        if len(wanted):
            rows = np.flatnonzero(np.isin(columns["eid"], wanted))
            rows = rows[np.lexsort((columns["sniffer"][rows], columns["tick"][rows]))]
            track.points = [(int(columns["tick"][r]), grid.position(int(columns["sniffer"][r]))) for r in rows]
        tracks[track.key_hex] = track
    return tracks


def score_tracks(grid: SnifferGrid, published_keys: Sequence[DiagnosisKey], catalog: EidCatalog,
                 key_owner: Dict[bytes, int]) -> Dict[str, object]:
    """评分：每个受害者的覆盖率、误归属点数、位置误差"""
    columns = grid.log.columns()
    owner_by_index: Dict[int, int] = {}
    for key in published_keys:
        owner = key_owner.get(key.key_bytes)
        for eid in expand_key(key):
            index = catalog.lookup(eid)
            if index is not None and owner is not None:
                owner_by_index[index] = owner

    coverage: Dict[str, float] = {}
    points_total = 0
    foreign_points = 0
    max_error = 0.0
    matched_ticks: Dict[int, Set[int]] = {}
    if owner_by_index and len(columns["eid"]):
        wanted = np.array(sorted(owner_by_index), dtype=np.int64)
        rows = np.flatnonzero(np.isin(columns["eid"], wanted))
        for r in rows:
            claimed = owner_by_index[int(columns["eid"][r])]
            actual = int(columns["agent"][r])
            points_total += 1
            if claimed != actual:
                foreign_points += 1
            sniffer = grid.positions[int(columns["sniffer"][r])]
            error = float(np.hypot(*(sniffer - columns["agent_xy"][r])))
            max_error = max(max_error, error)
            matched_ticks.setdefault(actual, set()).add(int(columns["tick"][r]))

    victim_days: Dict[int, Set[int]] = {}
    for key in published_keys:
        if key.key_bytes in key_owner:
            victim_days.setdefault(key_owner[key.key_bytes], set()).add(key.day_index)
    # 分母只算密钥已公开的那些天
    for victim in sorted(victim_days):
        per_day = grid.ticks_in_range.get(victim, {})
        in_range = sum(per_day.get(day, 0) for day in victim_days[victim])
        seen = len(matched_ticks.get(victim, set()))
        coverage[str(victim)] = seen / in_range if in_range else 0.0
    return {
        "track_coverage_per_victim": coverage,
        "reconstructed_points": points_total,
        "misattributed_points": foreign_points,
        "non_victim_points": sum(len(t) for a, t in matched_ticks.items() if a not in victim_days),
        "max_point_error_m": max_error,
        "points_within_range": max_error <= grid.range_m,
    }


# ---------------------------------------------------------------------------
# 中继 / 重放
# ---------------------------------------------------------------------------

class RelayAttack:
    """双向虫洞：采集区内的标识在目标处重播，目标的标识在采集区内重播

    注入的标识与采集到的逐字节相同（重放，不伪造）。
    """

    def __init__(self, config: RelayConfig, radio: RadioParams):
        self.config = config
        self.radio = radio
        self.cause = "replay" if config.mode == RelayMode.REPLAY else "relay"
        self.delay = config.relay_latency_ticks
        if config.mode == RelayMode.REPLAY:
            self.delay += config.replay_delay_ticks
        self.rssi_db = float(rssi_from_distance(config.replay_distance_m, radio))
        # 投递时刻 -> [(方向, 标识)]
        self._queue: Dict[int, List[Tuple[str, EphemeralId]]] = {}
        self.captured_eids: Set[bytes] = set()
        self.injected_receptions = 0

    def _zone_members(self, world: World, eids: Sequence[Optional[EphemeralId]]) -> List[int]:
        positions = world.positions
        centres = []
        if self.config.capture_x is not None and self.config.capture_y is not None:
            centres.append((self.config.capture_x, self.config.capture_y))
        for victim in self.config.victim_agent_ids:
            centres.append(world.position(victim))
        targets = set(self.config.target_agent_ids)
        members = set()
        for cx, cy in centres:
            distance = np.hypot(positions[:, 0] - cx, positions[:, 1] - cy)
            for agent_id in np.flatnonzero(distance <= self.config.capture_radius_m):
                agent_id = int(agent_id)
                if eids[agent_id] is not None and agent_id not in targets:
                    members.add(agent_id)
        return sorted(members)

    def capture(self, world: World, eids: Sequence[Optional[EphemeralId]], tick: int) -> int:
        """采集本tick的标识，排入 tick+延迟 的投递队列"""
        deliver = tick + self.delay
        batch = self._queue.setdefault(deliver, [])
        zone = self._zone_members(world, eids)
        for agent_id in zone:
            batch.append(("forward", eids[agent_id]))  # type: ignore[arg-type]
            self.captured_eids.add(eids[agent_id])  # type: ignore[arg-type]
        if self.config.bidirectional and zone:
            for target in sorted(set(self.config.target_agent_ids)):
                if eids[target] is not None:
                    batch.append(("reverse", eids[target]))  # type: ignore[arg-type]
                    self.captured_eids.add(eids[target])  # type: ignore[arg-type]
        return len(batch)

    def inject(self, world: World, eids: Sequence[Optional[EphemeralId]], tick: int) -> List[Reception]:
        """投递到期的标识：正向给目标，反向给当前在采集区内的人"""
        due = self._queue.pop(tick, [])
        if not due:
            return []
        targets = [t for t in sorted(set(self.config.target_agent_ids)) if eids[t] is not None]
        zone = self._zone_members(world, eids)
        receptions = []
        seen: Set[Tuple[int, bytes]] = set()
        for direction, eid in due:
            receivers = targets if direction == "forward" else zone
            for receiver in receivers:
                if eid == eids[receiver] or (receiver, eid) in seen:
                    continue
                seen.add((receiver, eid))
                receptions.append(Reception(receiver, eid, tick, self.rssi_db, self.cause))
        receptions.sort(key=lambda r: (r.receiver, r.sender_eid))
        self.injected_receptions += len(receptions)
        return receptions


def relay_attack_step(attack: RelayAttack, world: World, eids: Sequence[Optional[EphemeralId]],
                      tick: int) -> List[Reception]:
    """中继攻击的一步：先投递到期的，再采集本tick的"""
    injected = attack.inject(world, eids, tick)
    attack.capture(world, eids, tick)
    return injected


# ---------------------------------------------------------------------------
# 女巫
# ---------------------------------------------------------------------------

class SybilStation:
    """固定位置的攻击者：每个时间桶换一个新身份，记下桶内听到的标识"""

    def __init__(self, config: SybilConfig, step_seconds: int):
        self.config = config
        self.bucket_ticks = config.bucket_seconds // step_seconds
        # 桶 -> 听到的标识
        self.heard: Dict[int, Set[bytes]] = {}
        # 桶 -> 遇到的人（攻击者在现场看得到，评分用）
        self.encounters: Dict[int, Set[int]] = {}
        self.accounts_granted = 0
        self.accounts_denied = 0

    def listen(self, world: World, eids: Sequence[Optional[EphemeralId]], tick: int) -> int:
        bucket = tick // self.bucket_ticks
        positions = world.positions
        if len(positions) == 0:
            return 0
        distance = np.hypot(positions[:, 0] - self.config.attacker_x, positions[:, 1] - self.config.attacker_y)
        heard = 0
        for agent_id in np.flatnonzero(distance <= self.config.encounter_radius_m):
            agent_id = int(agent_id)
            self.encounters.setdefault(bucket, set()).add(agent_id)
            if eids[agent_id] is not None:
                self.heard.setdefault(bucket, set()).add(eids[agent_id])  # type: ignore[arg-type]
                heard += 1
        return heard

    def request_accounts(self, server: "CentralisedServer", tick: int) -> Dict[str, int]:
        """中心化方案：从同一来源批量注册账号"""
        from app.services.centralised import solve_challenge
        for _ in range(self.config.accounts_requested):
            nonce = server.issue_challenge("sybil")
            challenge = solve_challenge("sybil", nonce, server.tracing.pow_difficulty_bits)
            try:
                server.register_user("sybil", challenge, tick)
                self.accounts_granted += 1
            except (RateLimitExceededException, ChallengeFailedException):
                self.accounts_denied += 1
        logger.info(f"Sybil registration: {self.accounts_granted} granted, {self.accounts_denied} denied")
        return {"granted": self.accounts_granted, "denied": self.accounts_denied}


@dataclass
class SybilAttribution:
    """一个公开密钥与某个时间桶的匹配"""
    key_hex: str
    bucket: int
    window_ticks: Tuple[int, int]
    candidates: int
    attributed_agent: Optional[int]


def sybil_identify(station: SybilStation, published_keys: Sequence[DiagnosisKey]) -> List[SybilAttribution]:
    """把公开密钥的标识与各时间桶听到的标识比对；桶里只有一次相遇时才算唯一归属"""
    attributions = []
    for key in published_keys:
        key_eids = set(expand_key(key))
        for bucket in sorted(station.heard):
            if not key_eids & station.heard[bucket]:
                continue
            candidates = station.encounters.get(bucket, set())
            attributed = next(iter(candidates)) if len(candidates) == 1 else None
            start = bucket * station.bucket_ticks
            attributions.append(SybilAttribution(
                key_hex=key.hex(), bucket=bucket, window_ticks=(start, start + station.bucket_ticks - 1),
                candidates=len(candidates), attributed_agent=attributed,
            ))
    return attributions


def score_sybil(attributions: Sequence[SybilAttribution], key_owner: Dict[bytes, int],
                station: SybilStation, reporters: Set[int]) -> Dict[str, object]:
    """按真值计算重识别的精确率与召回率"""
    unique = [a for a in attributions if a.attributed_agent is not None]
    correct = [a for a in unique if key_owner.get(bytes.fromhex(a.key_hex)) == a.attributed_agent]
    reidentified = sorted({a.attributed_agent for a in correct})  # type: ignore[type-var]
    encountered = set().union(*station.encounters.values()) if station.encounters else set()
    infected_encounters = sorted(reporters & encountered)
    return {
        "attributions": len(attributions),
        "unique_attributions": len(unique),
        "ambiguous_attributions": len(attributions) - len(unique),
        "reidentified_victims": reidentified,
        "precision": len(correct) / len(unique) if unique else 0.0,
        "recall": len(reidentified) / len(infected_encounters) if infected_encounters else 0.0,
    }
