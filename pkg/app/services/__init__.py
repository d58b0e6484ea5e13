"""業務邏輯服務層：合成資料、訓練、推論、評估"""
