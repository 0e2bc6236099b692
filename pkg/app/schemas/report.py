from pydantic import BaseModel, ConfigDict, Field
from typing import Any, Dict, List, Optional


class RunManifest(BaseModel):
    """重现一次运行所需的全部信息"""
    run_id: str = Field(..., description="场景名-协议-种子")
    app_version: str
    scenario_path: Optional[str] = None
    scenario_digest: Optional[str] = Field(None, description="场景文件的SHA-256")
    seed: int
    protocol: str
    overrides: Dict[str, str] = Field(default_factory=dict, description="--set 覆盖项")
    blacklist_file: Optional[str] = None
    blacklist_digest: Optional[str] = None
    total_ticks: int
    config: Dict[str, Any] = Field(..., description="解析后的完整配置（含默认值）")
    outputs: List[str] = Field(default_factory=list)


class ConfusionCounts(BaseModel):
    """通知的混淆计数"""
    true_positive: int = 0
    false_positive: int = 0
    false_positive_attack: int = 0
    false_positive_noise: int = 0
    false_negative: int = 0
    ground_truth_exposed: int = 0


class LatencyStats(BaseModel):
    """从诊断上报到通知送达的延迟（单位tick，另附分钟）"""
    count: int = 0
    min_ticks: Optional[int] = None
    median_ticks: Optional[float] = None
    mean_ticks: Optional[float] = None
    p90_ticks: Optional[float] = None
    max_ticks: Optional[int] = None
    median_minutes: Optional[float] = None


class EpidemicSummary(BaseModel):
    attack_rate: float = 0.0
    ever_infected: int = 0
    peak_infectious: int = 0
    diagnosed: int = 0
    reported: int = 0
    quarantine_person_days: float = 0.0


class PrivacyLedger(BaseModel):
    """服务端实际保存的数据量（由数据库计数得到）"""
    server_health_entries: int = Field(0, description="诊断上报条数")
    server_social_edges: int = Field(0, description="不同的 (上报者, 接触者) 假名对")
    uploaded_keys: int = 0
    pseudonyms: int = 0
    location_observations: int = Field(0, description="服务端关联到假名的位置观测")
    sniffer_track_coverage: Optional[float] = Field(None, description="嗅探网格对受害者的平均轨迹覆盖率")


class OversightSummary(BaseModel):
    alerts: int = 0
    held_notifications: int = 0


class RunMetrics(BaseModel):
    protocol: str
    notifications_total: int = 0
    notifications: ConfusionCounts = Field(default_factory=ConfusionCounts)
    latency: LatencyStats = Field(default_factory=LatencyStats)
    epidemic: EpidemicSummary = Field(default_factory=EpidemicSummary)
    privacy_ledger: PrivacyLedger = Field(default_factory=PrivacyLedger)
    oversight: OversightSummary = Field(default_factory=OversightSummary)


class AttackReport(BaseModel):
    """攻击结果"""
    model_config = ConfigDict(extra="allow")

    attack_types: List[str] = Field(default_factory=list)
    injected_receptions: int = 0
    attack_notifications: int = 0
    oversight_alerts: int = 0
    reidentified_victims: List[int] = Field(default_factory=list)
    track_coverage_per_victim: Dict[str, float] = Field(default_factory=dict)
    sniffer: Optional[Dict[str, Any]] = None
    relay: Optional[Dict[str, Any]] = None
    sybil: Optional[Dict[str, Any]] = None


class RunReport(BaseModel):
    """report.json 的结构；随程序发布的JSON Schema由它生成"""
    manifest: RunManifest
    metrics: RunMetrics
    attack: Optional[AttackReport] = None


class ComparisonRow(BaseModel):
    """两次运行在同一指标上的对照"""
    metric: str
    run_a: Optional[float] = None
    run_b: Optional[float] = None


def report_json_schema() -> Dict[str, Any]:
    return RunReport.model_json_schema()
