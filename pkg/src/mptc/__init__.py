"""Multi-protocol consensus with threshold-coin reconfiguration, plus a
deterministic network simulator and a replicated state machine on top."""

__version__ = "0.1.0"
