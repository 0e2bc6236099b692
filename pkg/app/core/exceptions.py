class SimulationException(Exception):
    """仿真相关异常基类

    与HTTP状态码类似，每个子类携带一个进程退出码。
    """
    exit_code: int = 1
    default_detail: str = "仿真运行失败"

    def __init__(self, detail: str = ""):
        self.detail = detail or self.default_detail
        super().__init__(self.detail)


class ConfigParseException(SimulationException):
    """场景文件语法错误"""
    exit_code = 2
    default_detail = "场景文件解析失败"


class ConfigValidationException(SimulationException):
    """场景配置校验失败（消息中包含违反约束的字段名）"""
    exit_code = 2
    default_detail = "场景配置校验失败"

    def __init__(self, detail: str = "", field: str = ""):
        self.field = field
        super().__init__(detail)

    def __reduce__(self):
        return type(self), (self.detail, self.field)


class ScenarioMismatchException(SimulationException):
    """两次运行的场景不可比较"""
    exit_code = 2
    default_detail = "场景不匹配，无法比较"


class OutputDirectoryException(SimulationException):
    """输出目录非空，拒绝覆盖"""
    exit_code = 2
    default_detail = "输出目录已存在且非空"


class InvariantViolationException(SimulationException):
    """运行时不变量被破坏"""
    exit_code = 3
    default_detail = "运行时不变量被破坏"

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        self.raw_detail = detail
        super().__init__(f"[{invariant}] {detail}" if detail else f"[{invariant}]")

    def __reduce__(self):
        # 从工作进程传回时按构造参数重建，保留 invariant
        return type(self), (self.invariant, self.raw_detail)


class ReportWriteException(SimulationException):
    """报告写入失败"""
    exit_code = 1
    default_detail = "报告写入失败"


class DuplicateReportException(SimulationException):
    """同一用户重复上报"""
    default_detail = "该用户已经上报过诊断"


class ChallengeFailedException(SimulationException):
    """注册挑战校验失败"""
    default_detail = "注册令牌无效"


class RateLimitExceededException(SimulationException):
    """注册来源超过限流"""
    default_detail = "注册请求过于频繁"


class UnknownPseudonymException(SimulationException):
    """服务端不存在的假名"""
    default_detail = "假名不存在"


class IdentifierRangeException(SimulationException):
    """时间片序号越界"""
    default_detail = "时间片序号必须在 0..95 之间"


class DistanceDomainException(SimulationException):
    """距离必须为正数"""
    default_detail = "距离必须大于0"
