"""Versioned, multi-resolution time-series store."""

from .store import ENV_VAR, RAW_CHANNELS, StatPoint, Store, StreamKey, merge_stats

__all__ = ["ENV_VAR", "RAW_CHANNELS", "StatPoint", "Store", "StreamKey", "merge_stats"]
