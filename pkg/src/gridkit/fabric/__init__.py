from .calendar import CONFIRMED, DEFAULT_HOLD_TIMEOUT, TENTATIVE, Reservation, SlotCalendar, peak_load
from .catalog import CatalogResource
from .compute import CANCELLED, DONE, FAILED, QUEUED, RUNNING, TERMINAL, ComputeResource, Task
from .descriptor import ResourceDescriptor, matches
from .storage import StorageResource, normalize_path

__all__ = [
    "CANCELLED",
    "CONFIRMED",
    "CatalogResource",
    "ComputeResource",
    "DEFAULT_HOLD_TIMEOUT",
    "DONE",
    "FAILED",
    "QUEUED",
    "RUNNING",
    "Reservation",
    "ResourceDescriptor",
    "SlotCalendar",
    "StorageResource",
    "TENTATIVE",
    "TERMINAL",
    "Task",
    "matches",
    "normalize_path",
    "peak_load",
]
