"""Edge-cloud plant automation: context broker, device ingestion, history,
stream cognition, edge sync, placement and data governance."""

__version__ = "0.1.0"
