"""核心功能模組：張量 / 自動微分、運算、模組、優化器、檢查點"""
