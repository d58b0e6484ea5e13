"""錯誤類型定義 (Exception Hierarchy)

所有模組共用的例外類別。CLI 依據 `user_facing` 決定回傳碼：
使用者錯誤回傳 1，其餘內部錯誤回傳 2。
"""


class WeatherFormerError(Exception):
    """所有錯誤的基礎類別"""

    user_facing: bool = True


class DimensionError(WeatherFormerError, ValueError):
    """形狀或維度不符"""


class ContractError(WeatherFormerError):
    """違反操作前置條件（例如 loss 不是純量、重複呼叫 backward）"""


class ConfigError(WeatherFormerError, ValueError):
    """設定檔或模型設定錯誤"""


class AbsentGradError(WeatherFormerError):
    """查詢不存在的梯度"""


class AbsentClassError(WeatherFormerError, KeyError):
    """類別平均向量庫中找不到指定的天氣類別"""

    def __str__(self) -> str:
        # KeyError 會把訊息加上引號，這裡保留原始訊息
        return str(self.args[0]) if self.args else ""


class RoutingError(WeatherFormerError):
    """專家模型路由失敗"""


class DegenerateEmbeddingError(WeatherFormerError):
    """特徵向量範數為零，無法計算餘弦相似度"""


class NumericalError(WeatherFormerError, ArithmeticError):
    """前向運算產生 NaN 或 Inf"""

    user_facing = False


class CheckpointError(WeatherFormerError):
    """檢查點格式錯誤、CRC 驗證失敗或參數不符"""


class DatasetIOError(WeatherFormerError, OSError):
    """資料集容器讀寫失敗"""


class TrainingDivergedError(NumericalError):
    """訓練過程中 loss 變成非有限值"""

    def __init__(self, message: str, batch_seeds: list[int] | None = None, dump_path: str | None = None):
        super().__init__(message)
        self.batch_seeds = batch_seeds or []
        self.dump_path = dump_path
