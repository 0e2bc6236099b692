from pydantic_settings import BaseSettings
from typing import Optional


class Settings(BaseSettings):
    """应用配置类"""

    # 基础配置
    APP_NAME: str = "接触追踪仿真器"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False

    # 服务端状态数据库（每次运行独立的引擎，默认内存SQLite）
    SERVER_DATABASE_URL: str = "sqlite://"

    # 输出配置
    OUTPUT_ROOT: str = "runs"

    # 并行扫参配置
    MAX_WORKERS: int = 1

    # 日志配置
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = "logs/tracesim.log"

    class Config:
        env_file = ".env"
        case_sensitive = True
        extra = "ignore"  # 忽略未知的环境变量


# 全局配置实例
settings = Settings()


def get_settings() -> Settings:
    """获取配置实例"""
    return settings
