"""Scenario ingestion, experiment campaigns, and report emission."""

from .scenario import MarketScenario, load_scenario

__all__ = ["MarketScenario", "load_scenario"]
