from sqlalchemy import func
from sqlalchemy.orm import Session
from app.models.server import RegistrationAttempt
from typing import Optional
import logging

logger = logging.getLogger(__name__)


class RegistrationLimiter:
    """按注册来源限流（计数保存在 registration_attempts 表）"""

    def __init__(self, db: Session):
        self.db = db

    def _get_rate_limit_key(self, source: str, limit_type: str = "registration") -> str:
        """生成限流键"""
        return f"rate_limit:{limit_type}:{source}"

    def _check_rate_limit(self, source: str, limit: int, now_tick: int,
                          window_ticks: Optional[int] = None) -> tuple[bool, dict]:
        """
        检查限流状态

        Args:
            source: 注册来源
            limit: 窗口内允许成功注册的次数
            now_tick: 当前时刻
            window_ticks: 时间窗口（tick），None 表示整个运行期

        Returns:
            (是否通过, 限流信息)
        """
        query = self.db.query(func.count(RegistrationAttempt.id)).filter(
            RegistrationAttempt.source == source,
            RegistrationAttempt.granted.is_(True),
        )
        if window_ticks is not None:
            query = query.filter(RegistrationAttempt.tick > now_tick - window_ticks)
        current_count = query.scalar() or 0

        rate_limit_info = {
            "key": self._get_rate_limit_key(source),
            "limit": limit,
            "remaining": max(0, limit - current_count),
            "current_count": current_count,
        }
        if current_count >= limit:
            if window_ticks is not None:
                rate_limit_info["retry_after"] = window_ticks
            return False, rate_limit_info
        return True, rate_limit_info

    def check_source_rate_limit(self, source: str, limit: int, now_tick: int,
                                window_ticks: Optional[int] = None) -> tuple[bool, dict]:
        """检查某个来源能否再注册一个账号"""
        return self._check_rate_limit(source, limit, now_tick, window_ticks)

    def record_attempt(self, source: str, tick: int, granted: bool, reason: str) -> None:
        """记录一次注册请求（无论成败）"""
        self.db.add(RegistrationAttempt(source=source, tick=tick, granted=granted, reason=reason))
        self.db.flush()
        if not granted:
            logger.info(f"Registration from {source} denied at tick {tick}: {reason}")
