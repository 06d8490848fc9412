"""QoS-aware downlink OFDMA resource allocation.

Greedy subcarrier/power optimisation for delay-tolerant, delay-sensitive and
URLLC users, cascaded neural approximations of the optimiser, and transfer
learning across channel and service changes.
"""

from .allocator import (
    PowerTable,
    Scenario,
    exhaustive_oracle,
    greedy_min_total,
    greedy_min_transmit,
    validate_conditions,
)
from .config import SENSITIVE, SERVICES, TOLERANT, URLLC, Allocation, DatasetTemplate, SystemConfig, UserSpec
from .errors import QosraError

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "DatasetTemplate",
    "PowerTable",
    "QosraError",
    "SENSITIVE",
    "SERVICES",
    "Scenario",
    "SystemConfig",
    "TOLERANT",
    "URLLC",
    "UserSpec",
    "exhaustive_oracle",
    "greedy_min_total",
    "greedy_min_transmit",
    "validate_conditions",
]
