"""TimeMachine Forecaster - Source Package."""
