from .client import (
    Registrar,
    allocate,
    cancel,
    confirm,
    get,
    job_status,
    put,
    query_info,
    refresh,
    register,
    release,
    reserve,
    stat,
    transfer,
    unregister,
)
from .host import ResourceHost
from .types import JobRecord, JobRequest, TransferReport, TransferRequest, chunk_ranges

__all__ = [
    "JobRecord",
    "JobRequest",
    "Registrar",
    "ResourceHost",
    "TransferReport",
    "TransferRequest",
    "allocate",
    "cancel",
    "chunk_ranges",
    "confirm",
    "get",
    "job_status",
    "put",
    "query_info",
    "refresh",
    "register",
    "release",
    "reserve",
    "stat",
    "transfer",
    "unregister",
]
