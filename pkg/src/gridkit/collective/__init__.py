from .broker import discover_and_rank, rank_candidates, rank_key, satisfies
from .cas import CommunityAuthorizationService, request_capability, verify_capability
from .coalloc import (
    ABORTED,
    CONFIRMED,
    CoAllocationPlan,
    CoReservationService,
    Leg,
    co_reserve_end_to_end,
    coallocate,
    release_plan,
    request_co_reservation,
    resolve_legs,
)
from .index import FailureMonitor, IndexService, Registration, failure_events, index_query
from .replica import replica_cost, replica_locate, replica_register, replica_select

__all__ = [
    "ABORTED",
    "CONFIRMED",
    "CoAllocationPlan",
    "CoReservationService",
    "CommunityAuthorizationService",
    "FailureMonitor",
    "IndexService",
    "Leg",
    "Registration",
    "co_reserve_end_to_end",
    "coallocate",
    "discover_and_rank",
    "failure_events",
    "index_query",
    "rank_candidates",
    "rank_key",
    "release_plan",
    "replica_cost",
    "replica_locate",
    "replica_register",
    "replica_select",
    "request_capability",
    "request_co_reservation",
    "resolve_legs",
    "satisfies",
    "verify_capability",
]
