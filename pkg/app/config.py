"""應用程式配置管理

- `Settings`: 執行環境設定（環境變數 / .env）
- `load_config()`: 讀取 `key = value` 格式的實驗設定檔
"""

from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError
from app.schemas.config import ExperimentConfig


class Settings(BaseSettings):
    """執行環境設定"""

    # 應用設定
    APP_NAME: str = "WeatherFormer Toy Lab"
    DEBUG: bool = False  # 設為 True 會逐步印出 loss

    # 路徑
    DATA_DIR: str = "./data"
    OUTPUT_DIR: str = "./outputs"

    # 執行
    EVAL_WORKERS: int = 1  # 評估時的執行緒數（模型唯讀）
    LOG_EVERY: int = 50  # 訓練進度列印間隔（步）

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    @property
    def data_path(self) -> Path:
        return Path(self.DATA_DIR)

    @property
    def output_path(self) -> Path:
        return Path(self.OUTPUT_DIR)


# 建立全域設定實例
settings = Settings()


def _is_list_field(model: type[BaseModel], name: str) -> bool:
    field = model.model_fields.get(name)
    if field is None:
        return False
    annotation = field.annotation
    if get_origin(annotation) is Union:
        annotation = next((a for a in get_args(annotation) if a is not type(None)), annotation)
    return get_origin(annotation) is list


def parse_config_text(text: str, source: str = "<text>") -> dict[str, dict[str, Any]]:
    """
    解析 `key = value` 設定文字

    規則:
        - `#` 之後為註解
        - 鍵為 `section.name`（例如 `model.channels = 16,32,48,64`）
        - 清單欄位以逗號分隔

    返回:
        {section: {name: raw value}}
    """
    sections = ExperimentConfig.model_fields
    parsed: dict[str, dict[str, Any]] = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: 缺少 '='：{raw_line.strip()}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: 鍵必須是 section.name 形式：{key}")
        section, name = key.split(".")
        if section not in sections:
            raise ConfigError(f"{source}:{lineno}: 未知的設定區段 '{section}'")
        model = sections[section].annotation
        if name not in model.model_fields:
            raise ConfigError(f"{source}:{lineno}: 未知的設定鍵 '{key}'")
        if _is_list_field(model, name):
            parsed.setdefault(section, {})[name] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            parsed.setdefault(section, {})[name] = value
    return parsed


def build_config(values: dict[str, dict[str, Any]], source: str = "<text>") -> ExperimentConfig:
    """以 pydantic 驗證，錯誤轉為 ConfigError"""
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{source}: 設定值錯誤 {where}: {first['msg']}") from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict[str, dict[str, Any]]] = None) -> ExperimentConfig:
    """
    讀取實驗設定檔

    參數:
        path: 設定檔路徑（None 表示全部使用預設值）
        overrides: 額外覆寫的值（例如命令列的 --seed）

    返回:
        ExperimentConfig
    """
    values: dict[str, dict[str, Any]] = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"無法讀取設定檔 {path}: {e}") from e
        values = parse_config_text(text, source)
    for section, items in (overrides or {}).items():
        values.setdefault(section, {}).update(items)
    return build_config(values, source)


def dump_config(config: ExperimentConfig) -> str:
    """輸出為 `key = value` 文字（load_config 可讀回）"""
    lines = []
    for section in ExperimentConfig.model_fields:
        for name, value in getattr(config, section).model_dump().items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{section}.{name} = {value}")
    return "\n".join(lines) + "\n"
