from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker, Session
from sqlalchemy.pool import StaticPool
from app.core.config import settings
from typing import Optional
import logging

logger = logging.getLogger(__name__)

Base = declarative_base()


def create_server_engine(database_url: Optional[str] = None) -> Engine:
    """创建服务端状态引擎

    每次仿真运行使用独立的引擎；默认是内存SQLite，运行结束即销毁。
    使用其他数据库URL时必须保证每次运行指向一个空库。
    """
    url = database_url or settings.SERVER_DATABASE_URL
    if url.startswith("sqlite"):
        # 内存库只存在于单个连接上，必须固定连接
        engine = create_engine(
            url,
            poolclass=StaticPool,
            connect_args={"check_same_thread": False},
            echo=settings.DEBUG
        )
    else:
        engine = create_engine(url, pool_pre_ping=True, echo=settings.DEBUG)

    # 导入所有模型以确保它们被注册到Base.metadata
    from app.models import server  # noqa

    Base.metadata.create_all(bind=engine)
    return engine


def open_server_session(database_url: Optional[str] = None) -> Session:
    """为一个追踪服务端打开数据库会话"""
    engine = create_server_engine(database_url)
    session_factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    return session_factory()


def close_server_session(session: Session) -> None:
    """关闭会话并释放引擎"""
    engine = session.get_bind()
    try:
        session.close()
    finally:
        engine.dispose()
