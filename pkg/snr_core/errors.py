"""
模块名称: 错误类型 (errors.py)

功能描述:
    项目内所有可预期错误的统一定义。库代码只负责抛出，
    由入口脚本 `snr_assistant.py` 统一捕获并转换为提示信息和退出码：
        0 成功 / 1 契约或配置错误 / 2 数值失败 / 3 I/O 错误
"""


class SnrError(Exception):
    """所有项目内错误的基类。`exit_code` 决定命令行的退出码。"""
    exit_code = 1


# --- 契约 / 配置类 (退出码 1) ---
class ContractError(SnrError):
    exit_code = 1


class DimensionError(ContractError):
    """形状不匹配。"""


class GeometryError(ContractError):
    """卷积几何或区域框不合法。"""


class ConfigError(ContractError):
    """配置键未知或类型错误。"""


class CheckpointMismatchError(ContractError):
    """检查点里的张量与当前模型结构对不上。"""


# --- 数值类 (退出码 2) ---
class NumericalError(SnrError):
    exit_code = 2


class GradCheckFailure(NumericalError):
    """梯度检查超出容差。`failures` 保存每一条失败记录。"""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or []


# --- I/O 类 (退出码 3) ---
class SnrIOError(SnrError):
    exit_code = 3


class FormatError(SnrIOError):
    """文件格式不对，或缺少 manifest。"""


class CorruptionError(SnrIOError):
    """校验和不一致或文件被截断。"""


class DatasetMissingError(SnrIOError):
    """找不到数据集目录。"""
