"""
顺序事件循环：把移动、信道、协议、疫情和攻击按固定顺序串起来，
并记录评分用的真值日志。
"""
from sqlalchemy.orm import Session
from app.core.database import close_server_session, open_server_session
from app.core.exceptions import InvariantViolationException
from app.schemas.scenario import Protocol, ScenarioConfig, SnifferOperator
from app.services import centralised, decentralised
from app.services.attacks import (
    RelayAttack, SnifferGrid, SybilStation, relay_attack_step, reconstruct_tracks,
    score_sybil, score_tracks, sniff_round, sybil_identify
)
from app.services.contacts import DeviceState, ExposureNotification, on_reception, on_reception_batch
from app.services.epidemic import (
    apply_quarantine, check_conservation, progress_and_diagnose, seed_infections, stage_counts, transmit_step
)
from app.services.identifiers import EidCatalog, EphemeralId
from app.services.radio import broadcast_columns
from app.services.world import Stage, World, pairwise_distances, step_mobility
from app.utils.random_streams import RandomStreams
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import logging

logger = logging.getLogger(__name__)


@dataclass
class DiagnosisEvent:
    """一次确诊（不论是否安装应用、是否同意上报）"""
    tick: int
    agent_id: int
    has_app: bool
    reported: bool


@dataclass
class ContactLog:
    """真值接触日志：距离不超过感染半径的 (tick, a, b)，a < b"""
    ticks: List[np.ndarray] = field(default_factory=list)
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)
    distance: List[np.ndarray] = field(default_factory=list)

    def append(self, tick: int, a: np.ndarray, b: np.ndarray, d: np.ndarray) -> None:
        if len(a) == 0:
            return
        self.ticks.append(np.full(len(a), tick, dtype=np.int64))
        self.first.append(a.astype(np.int64))
        self.second.append(b.astype(np.int64))
        self.distance.append(d.astype(float))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if not self.ticks:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty, np.zeros(0)
        return (np.concatenate(self.ticks), np.concatenate(self.first),
                np.concatenate(self.second), np.concatenate(self.distance))


@dataclass
class SimulationResult:
    """一次运行的全部产出（指标都从这里重新计算）"""
    config: ScenarioConfig
    adopters: List[int]
    notifications: List[ExposureNotification]
    diagnoses: List[DiagnosisEvent]
    contacts: ContactLog
    timeseries: List[Tuple]
    final_counts: Dict[str, int]
    ever_infected: int
    peak_infectious: int
    quarantine_person_days: float
    ledger: Dict[str, int]
    oversight: Dict[str, int]
    key_uploads: int
    attack: Optional[Dict[str, object]] = None
    captured_eids: List[bytes] = field(default_factory=list)
    receptions: List[Tuple] = field(default_factory=list)
    trajectories: List[Tuple] = field(default_factory=list)

    @property
    def report_ticks(self) -> Dict[int, int]:
        return {event.agent_id: event.tick for event in self.diagnoses if event.reported}


TIMESERIES_HEADER = (
    "tick", "susceptible", "exposed", "infectious", "diagnosed", "recovered",
    "diagnosed_cum", "quarantined", "notifications_cum",
)


class Simulation:
    """一次确定性的仿真运行"""

    def __init__(self, config: ScenarioConfig, blacklist: Sequence[bytes] = (), db: Optional[Session] = None):
        self.config = config
        self.streams = RandomStreams(config.rng_seed)
        self.world = World(config, self.streams.stream("mobility"), self.streams.stream("population"))
        self.clock = self.world.clock
        self.protocol = config.protocol
        self._owns_db = db is None
        self.db = db if db is not None else open_server_session()
        self.catalog = EidCatalog()

        self.notifications: List[ExposureNotification] = []
        self.diagnoses: List[DiagnosisEvent] = []
        self.contacts = ContactLog()
        self.timeseries: List[Tuple] = []
        self.receptions: List[Tuple] = []
        self.trajectories: List[Tuple] = []
        self._quarantine_ticks = 0
        self._peak_infectious = 0
        self._key_uploads = 0
        self._oversight_alerts = 0
        self._location_buffer: List[Tuple[bytes, int, float, float]] = []

        self.server_d: Optional[decentralised.DecentralisedServer] = None
        self.server_c: Optional[centralised.CentralisedServer] = None
        if self.protocol == Protocol.DECENTRALISED:
            self.server_d = decentralised.DecentralisedServer(self.db)
        else:
            self.server_c = centralised.CentralisedServer(
                self.db, config.tracing, config.radio, self.streams.stream("server"), config.step_seconds
            )

        for agent in self.world.agents:
            if agent.has_app:
                agent.device = DeviceState(owner=agent.agent_id, rng=self.streams.device_stream(agent.agent_id))
        # 按人的下标索引，未安装应用者为None
        self._agent_devices: List[Optional[DeviceState]] = [agent.device for agent in self.world.agents]
        if self.server_c is not None:
            self._register_devices()
        if blacklist:
            centralised.blacklist_ids(self.db, blacklist, 0)

        attack = config.attack
        self.sniffers: Optional[SnifferGrid] = None
        self.relay: Optional[RelayAttack] = None
        self.sybil: Optional[SybilStation] = None
        if attack is not None:
            if attack.sniffer is not None:
                self.sniffers = SnifferGrid.from_config(
                    attack.sniffer, config.world_width_m, config.world_height_m, config.radio, config.ticks_per_day
                )
            if attack.relay is not None:
                self.relay = RelayAttack(attack.relay, config.radio)
            if attack.sybil is not None:
                self.sybil = SybilStation(attack.sybil, config.step_seconds)
                if self.server_c is not None:
                    self.sybil.request_accounts(self.server_c, 0)

        seed_infections(self.world, config.epidemic, self.clock,
                        self.streams.stream("population"), self.streams.stream("epidemic"))

    @property
    def devices(self) -> List[DeviceState]:
        return [agent.device for agent in self.world.agents if agent.device is not None]

    def _register_devices(self) -> None:
        bits = self.config.tracing.pow_difficulty_bits
        for device in self.devices:
            source = f"device-{device.owner}"
            nonce = self.server_c.issue_challenge(source)
            challenge = centralised.solve_challenge(source, nonce, bits)
            device.pseudonym = self.server_c.register_user(source, challenge, 0)

    # ---- 周期性工作 ----

    def _publish_and_match(self) -> List[ExposureNotification]:
        batch = decentralised.publish_batch(self.server_d, self.clock)
        notified = []
        if not batch.keys:
            return notified
        for device in self.devices:
            notified.extend(decentralised.match_local(
                device, batch, self.config.tracing, self.config.radio, self.clock
            ))
        return notified

    def _oversight_and_poll(self) -> List[ExposureNotification]:
        alerts = self.server_c.detect_mass_notification(self.clock, window_ticks=self.config.ticks_per_day)
        self._oversight_alerts += len(alerts)
        notified = []
        for device in self.devices:
            notification = self.server_c.poll_status(device, self.clock)
            if notification is not None:
                notified.append(notification)
        return notified

    def _start_day(self) -> None:
        day = self.clock.day_index
        for device in self.devices:
            device.prune(self.clock)
            if self.server_d is not None:
                decentralised.ensure_daily_key(device, day)
            else:
                device.issued_ids[day] = self.server_c.issue_ids(device.pseudonym, day)
                device.issued_ids = {d: ids for d, ids in device.issued_ids.items() if d > day - 14}
        if self.server_c is not None:
            self.server_c.prune_issued(self.clock)

    def _start_interval(self) -> None:
        self._flush_locations()
        for device in self.devices:
            if self.server_d is not None:
                eid = decentralised.set_current_eid(device, self.clock)
            else:
                eid = device.issued_ids[self.clock.day_index][self.clock.interval_in_day]
                device.current_eid = eid
                device.sent_ids[self.clock.interval_index] = eid
            self._intern_fresh(eid, device.owner)

    def _intern_fresh(self, eid: EphemeralId, owner: int) -> None:
        """每个时间片的新标识都必须从未广播过"""
        size = len(self.catalog)
        if self.catalog.intern(eid) < size:
            raise InvariantViolationException(
                "eid_rotation", f"agent {owner} re-broadcast an identifier at tick {self.clock.tick}"
            )

    def _flush_locations(self) -> None:
        if self._location_buffer and self.server_c is not None:
            self.server_c.record_location_observations(self._location_buffer)
        self._location_buffer = []

    # ---- 单步 ----

    def _current_eids(self) -> List[Optional[EphemeralId]]:
        return [agent.device.current_eid if agent.device is not None else None for agent in self.world.agents]

    def _log_contacts(self, distances: np.ndarray) -> None:
        if self.world.n_agents < 2:
            return
        close = np.triu(distances <= self.config.epidemic.infection_radius_m, k=1)
        a, b = np.nonzero(close)
        self.contacts.append(self.clock.tick, a, b, distances[a, b])

    def _run_attacks(self, eids: List[Optional[EphemeralId]]) -> None:
        tick = self.clock.tick
        if self.sniffers is not None:
            observations = sniff_round(self.sniffers, self.world, eids, self.catalog, tick,
                                       self.streams.stream("attack"))
            if self.sniffers.operator == SnifferOperator.CENTRAL_SERVER and self.server_c is not None:
                self._location_buffer.extend(
                    (obs.eid, obs.tick, obs.sniffer_pos[0], obs.sniffer_pos[1]) for obs in observations
                )
        if self.relay is not None:
            for reception in relay_attack_step(self.relay, self.world, eids, tick):
                self._deliver(reception)
        if self.sybil is not None:
            self.sybil.listen(self.world, eids, tick)

    def _deliver_broadcast(self, distances: np.ndarray, eids: List[Optional[EphemeralId]]) -> None:
        """真实广播按列批量并入各设备"""
        tick = self.clock.tick
        receivers, senders, rssi = broadcast_columns(distances, eids, self.config.radio, self.streams.stream("radio"))
        if len(receivers) == 0:
            return
        receivers_list, senders_list, rssi_list = receivers.tolist(), senders.tolist(), rssi.tolist()
        on_reception_batch(self._agent_devices, receivers_list, senders_list, eids, tick, rssi_list)
        if self.config.output.receptions_csv:
            self.receptions.extend(
                (tick, receiver, eids[sender].hex(), level, "true")  # type: ignore[union-attr]
                for receiver, sender, level in zip(receivers_list, senders_list, rssi_list)
            )

    def _deliver(self, reception) -> None:
        on_reception(self.world.agents[reception.receiver].device, reception)
        if self.config.output.receptions_csv:
            self.receptions.append((reception.tick, reception.receiver, reception.sender_eid.hex(),
                                    reception.rssi_db, reception.cause))

    def _report(self, diagnosed: List[int]) -> None:
        consent_probability = self.config.tracing.reporting_probability
        consent_rng = self.streams.stream("consent")
        for agent_id in diagnosed:
            agent = self.world.agents[agent_id]
            reported = False
            if agent.device is not None:
                if consent_probability >= 1:
                    reported = True
                elif consent_probability > 0:
                    reported = bool(consent_rng.random() < consent_probability)
            if reported:
                if self.server_d is not None:
                    keys = decentralised.report_diagnosis(agent.device, self.server_d, self.clock)
                    self._intern_fresh(agent.device.current_eid, agent_id)
                    self._key_uploads += len(keys)
                else:
                    self.server_c.report_diagnosis_central(agent.device, self.clock)
            self.diagnoses.append(DiagnosisEvent(self.clock.tick, agent_id, agent.has_app, reported))

    def _record_row(self) -> None:
        counts = stage_counts(self.world)
        quarantined = int(self.world.quarantine_mask().sum()) if self.world.n_agents else 0
        self._quarantine_ticks += quarantined
        infectious = counts[Stage.INFECTIOUS.value] + counts[Stage.DIAGNOSED.value]
        self._peak_infectious = max(self._peak_infectious, infectious)
        self.timeseries.append((
            self.clock.tick,
            counts[Stage.SUSCEPTIBLE.value],
            counts[Stage.EXPOSED.value],
            counts[Stage.INFECTIOUS.value],
            counts[Stage.DIAGNOSED.value],
            counts[Stage.RECOVERED.value],
            len(self.diagnoses),
            quarantined,
            len(self.notifications),
        ))
        if self.config.output.trajectories_csv:
            for agent_id, (x, y) in enumerate(self.world.positions):
                self.trajectories.append((self.clock.tick, agent_id, float(x), float(y)))

    def _check_invariants(self) -> None:
        check_conservation(self.world)
        if not self.world.in_bounds():
            raise InvariantViolationException("bounds", f"agent left the world at tick {self.clock.tick}")
        for device in self.devices:
            if device.sent_ids.get(self.clock.interval_index) != device.current_eid:
                raise InvariantViolationException(
                    "eid_per_interval", f"agent {device.owner} at tick {self.clock.tick}"
                )

    def _periodic(self) -> List[ExposureNotification]:
        """批次只在24小时边界发布，轮询只在轮询周期边界进行（运行结束时也一样）"""
        tick = self.clock.tick
        if self.server_d is not None:
            if tick > 0 and tick % self.config.ticks_per_day == 0:
                return self._publish_and_match()
            return []
        poll_ticks = self.config.tracing.poll_interval_s // self.config.step_seconds
        if tick % poll_ticks == 0:
            return self._oversight_and_poll()
        return []

    def step(self) -> None:
        """推进一个tick"""
        config = self.config

        new_notifications = self._periodic()
        self.notifications.extend(new_notifications)
        if self.clock.is_day_boundary():
            self._start_day()
        if self.clock.is_interval_boundary():
            self._start_interval()

        distances = pairwise_distances(self.world)
        self._log_contacts(distances)
        eids = self._current_eids()
        self._deliver_broadcast(distances, eids)
        self._run_attacks(eids)

        transmit_step(self.world, config.epidemic, distances, self.clock, self.streams.stream("epidemic"))
        self._report(progress_and_diagnose(self.world, config.epidemic, self.clock))
        apply_quarantine(self.world, new_notifications, config.epidemic, self.clock,
                         self.streams.stream("quarantine"))

        self._record_row()
        self._check_invariants()
        step_mobility(self.world)
        self.clock.advance()

    def run(self) -> SimulationResult:
        """跑完整个场景并汇总结果；服务端会话在结束时关闭"""
        from app.services.metrics import measure_ledger

        total = self.config.total_ticks
        logger.info(
            f"Simulation '{self.config.name}' started: {self.world.n_agents} agents, "
            f"{total} ticks, protocol={self.protocol.value}, seed={self.config.rng_seed}"
        )
        try:
            while self.clock.tick < total:
                self.step()
            self.notifications.extend(self._periodic())
            self._flush_locations()
            self.notifications.sort(key=lambda n: (n.trigger_tick, n.agent_id))

            attack = self._attack_outcome()
            ledger = measure_ledger(self.db)
            if self.sniffers is not None:
                ledger["sniffer_track_coverage"] = attack["sniffer"]["mean_track_coverage"]  # type: ignore[index]
            oversight = {
                "alerts": self._oversight_alerts,
                "held_notifications": self.server_c.held_count() if self.server_c is not None else 0,
            }
            counts = stage_counts(self.world)
            result = SimulationResult(
                config=self.config,
                adopters=[agent.agent_id for agent in self.world.agents if agent.has_app],
                notifications=self.notifications,
                diagnoses=self.diagnoses,
                contacts=self.contacts,
                timeseries=self.timeseries,
                final_counts=counts,
                ever_infected=sum(1 for agent in self.world.agents if agent.health.ever_infected),
                peak_infectious=self._peak_infectious,
                quarantine_person_days=self._quarantine_ticks / self.config.ticks_per_day,
                ledger=ledger,
                oversight=oversight,
                key_uploads=self._key_uploads,
                attack=attack,
                captured_eids=sorted(self.relay.captured_eids) if self.relay is not None else [],
                receptions=self.receptions,
                trajectories=self.trajectories,
            )
        finally:
            if self._owns_db:
                close_server_session(self.db)
        logger.info(
            f"Simulation '{self.config.name}' finished: {len(result.notifications)} notifications, "
            f"{len(result.diagnoses)} diagnoses"
        )
        return result

    # ---- 攻击汇总 ----

    def _key_owner(self) -> Dict[bytes, int]:
        return {key: device.owner for device in self.devices for key in device.key_history}

    def _attack_outcome(self) -> Optional[Dict[str, object]]:
        if self.config.attack is None:
            return None
        published = self.server_d.published_keys() if self.server_d is not None else []
        key_owner = self._key_owner()
        outcome: Dict[str, object] = {
            "attack_types": [name for name in ("sniffer", "relay", "sybil")
                             if getattr(self.config.attack, name) is not None],
            "oversight_alerts": self._oversight_alerts,
        }
        if self.sniffers is not None:
            tracks = reconstruct_tracks(self.sniffers, published, self.catalog)
            scores = score_tracks(self.sniffers, published, self.catalog, key_owner)
            coverage = scores["track_coverage_per_victim"]
            scores.update({
                "operator": self.sniffers.operator.value,
                "sniffer_count": len(self.sniffers.positions),
                "observations": len(self.sniffers.log),
                "reconstructed_tracks": sum(1 for track in tracks.values() if track.points),
                "mean_track_coverage": float(np.mean(list(coverage.values()))) if coverage else 0.0,  # type: ignore[union-attr]
            })
            outcome["sniffer"] = scores
        if self.relay is not None:
            attack_causes = {"relay_attack", "replay_attack"}
            outcome["relay"] = {
                "mode": self.relay.config.mode.value,
                "injected_receptions": self.relay.injected_receptions,
                "captured_eids": len(self.relay.captured_eids),
                "attack_notifications": sum(1 for n in self.notifications if n.cause in attack_causes),
                "target_notifications": sorted(
                    n.agent_id for n in self.notifications if n.agent_id in set(self.relay.config.target_agent_ids)
                ),
            }
        if self.sybil is not None:
            reporters = {event.agent_id for event in self.diagnoses if event.reported}
            attributions = sybil_identify(self.sybil, published)
            sybil = score_sybil(attributions, key_owner, self.sybil, reporters)
            sybil.update({
                "buckets_logged": len(self.sybil.heard),
                "accounts_granted": self.sybil.accounts_granted,
                "accounts_denied": self.sybil.accounts_denied,
            })
            outcome["sybil"] = sybil
        return outcome


def run_simulation(config: ScenarioConfig, blacklist: Sequence[bytes] = ()) -> SimulationResult:
    return Simulation(config, blacklist).run()
