"""
WeatherFormer Toy Lab - 多天氣自適應影像還原（桌面規模）
"""

__version__ = "1.0.0"
