"""Station-based shared EV simulator with dynamic daily deployment and planners."""

__version__ = "0.1.0"

STEPS_PER_DAY = 144
MINUTES_PER_STEP = 10
