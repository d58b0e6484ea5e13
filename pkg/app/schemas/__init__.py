"""Pydantic Schemas - 設定、樣本、分數與報表的資料驗證"""

from app.schemas.config import BackboneConfig, DataConfig, ExperimentConfig, FeatureConfig, TrainConfig
from app.schemas.report import AblationReport, AblationRow, ClassMetrics, ComputeReport, EvalReport, StudyReport
from app.schemas.weather import (
    DegradationClass,
    FiLMParams,
    WeatherFeatureVector,
    WeatherSample,
    WeatherScores,
)

__all__ = [
    "BackboneConfig",
    "DataConfig",
    "ExperimentConfig",
    "FeatureConfig",
    "TrainConfig",
    "AblationReport",
    "AblationRow",
    "ClassMetrics",
    "ComputeReport",
    "EvalReport",
    "StudyReport",
    "DegradationClass",
    "FiLMParams",
    "WeatherFeatureVector",
    "WeatherSample",
    "WeatherScores",
]
