"""Sharing-policy rules and the deny-overrides evaluator.

Rules are checked only after the operation is known to be among the
requester's delegated rights: policy can narrow what a chain allows, never
widen it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .connectivity.credentials import Identity, has_right
from .wire.codec import decode_value, encode_value

COMPARATORS = ("==", "<=", ">=")
KNOWN_ATTRIBUTES = ("problem_size", "duration", "time_of_day", "certified")
MEMBER_PREFIX = "member:"


@dataclass(frozen=True)
class Condition:
    attribute: str
    comparator: str
    value: Any

    def __post_init__(self) -> None:
        if self.comparator not in COMPARATORS:
            raise ValueError(f"comparator must be one of {COMPARATORS}")
        if not isinstance(self.value, (int, str)):  # bool is an int
            raise ValueError("condition values are integers, booleans or strings")

    def holds(self, actual: Any) -> bool:
        if self.comparator == "==":
            return type(actual) is type(self.value) and actual == self.value
        if isinstance(self.value, bool) or isinstance(actual, bool):
            return False
        if isinstance(self.value, str) != isinstance(actual, str):
            return False
        if not isinstance(actual, (int, float, str)):
            return False
        return actual <= self.value if self.comparator == "<=" else actual >= self.value

    def to_record(self) -> list:
        return [self.attribute, self.comparator, self.value]

    @classmethod
    def from_record(cls, record) -> "Condition":
        if isinstance(record, dict):
            return cls(record["attribute"], record["comparator"], record["value"])
        attribute, comparator, value = record
        return cls(attribute, comparator, value)

    def __str__(self) -> str:
        return f"{self.attribute} {self.comparator} {self.value!r}"


@dataclass(frozen=True)
class PolicyRule:
    principal_pattern: str = "*"
    vo: str = "*"
    operation: str = "*"
    resource_pattern: str = "*"
    effect: str = "allow"
    conditions: tuple[Condition, ...] = ()

    def __post_init__(self) -> None:
        if self.effect not in ("allow", "deny"):
            raise ValueError("effect must be allow or deny")

    def to_record(self) -> dict:
        return {
            "principal": self.principal_pattern,
            "vo": self.vo,
            "operation": self.operation,
            "resource": self.resource_pattern,
            "effect": self.effect,
            "conditions": [c.to_record() for c in self.conditions],
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "PolicyRule":
        return cls(
            principal_pattern=record.get("principal", "*"),
            vo=record.get("vo", "*"),
            operation=record.get("operation", "*"),
            resource_pattern=record.get("resource", "*"),
            effect=record.get("effect", "allow"),
            conditions=tuple(Condition.from_record(c) for c in record.get("conditions", [])),
        )


@dataclass(frozen=True)
class AccessRequest:
    principal: Identity | str
    effective_rights: frozenset[str]
    vo: str
    operation: str
    resource: str
    context: Mapping[str, Any] = field(default_factory=dict)
    memberships: frozenset[str] = frozenset()

    @property
    def principal_name(self) -> str:
        return self.principal.name if isinstance(self.principal, Identity) else self.principal


@dataclass(frozen=True)
class Decision:
    allowed: bool
    rule: int | None
    reason: str
    diagnostics: tuple[str, ...] = ()

    @property
    def effect(self) -> str:
        return "allow" if self.allowed else "deny"

    def to_record(self) -> dict:
        return {
            "effect": self.effect,
            "rule": self.rule,
            "reason": self.reason,
            "diagnostics": list(self.diagnostics),
        }


def glob_match(pattern: str, name: str) -> bool:
    """Anchored glob where ``*`` matches any run of characters (``/`` included)."""
    p = n = 0
    star = -1
    mark = 0
    while n < len(name):
        if p < len(pattern) and pattern[p] != "*" and pattern[p] == name[n]:
            p += 1
            n += 1
        elif p < len(pattern) and pattern[p] == "*":
            star = p
            mark = n
            p += 1
        elif star >= 0:
            p = star + 1
            mark += 1
            n = mark
        else:
            return False
    while p < len(pattern) and pattern[p] == "*":
        p += 1
    return p == len(pattern)


def _principal_matches(pattern: str, request: AccessRequest) -> bool:
    if pattern.startswith(MEMBER_PREFIX):
        return pattern[len(MEMBER_PREFIX):] in request.memberships
    return glob_match(pattern, request.principal_name)


def rule_matches(rule: PolicyRule, request: AccessRequest, diagnostics: list[str] | None = None) -> bool:
    if not _principal_matches(rule.principal_pattern, request):
        return False
    if rule.vo != "*" and rule.vo != request.vo:
        return False
    if rule.operation != "*" and rule.operation != request.operation:
        return False
    if not glob_match(rule.resource_pattern, request.resource):
        return False
    for cond in rule.conditions:
        if cond.attribute not in request.context:
            if diagnostics is not None:
                diagnostics.append(f"UnknownAttribute: {cond.attribute} absent from context")
            return False
        if not cond.holds(request.context[cond.attribute]):
            return False
    return True


def evaluate(request: AccessRequest, rules: Sequence[PolicyRule]) -> Decision:
    if not has_right(request.effective_rights, request.operation):
        return Decision(False, None, f"{request.operation} not among delegated rights")
    diagnostics: list[str] = []
    first_allow: int | None = None
    for index, rule in enumerate(rules):
        if not rule_matches(rule, request, diagnostics):
            continue
        if rule.effect == "deny":
            return Decision(False, index, f"deny rule {index} matched", tuple(diagnostics))
        if first_allow is None:
            first_allow = index
    if first_allow is not None:
        return Decision(True, first_allow, f"allow rule {first_allow} matched", tuple(diagnostics))
    return Decision(False, None, "no rule matched (default deny)", tuple(diagnostics))


def policy_summary(rules: Iterable[PolicyRule]) -> dict:
    rules = list(rules)
    conditions = sorted({str(c) for r in rules for c in r.conditions})
    return {"rules": len(rules), "conditions": conditions}


def rules_from_record(records: Iterable[Mapping]) -> list[PolicyRule]:
    return [PolicyRule.from_record(r) for r in records]


def save_policy(rules: Iterable[PolicyRule], path: str | Path) -> None:
    Path(path).write_bytes(encode_value([r.to_record() for r in rules]))


def load_policy(path: str | Path) -> list[PolicyRule]:
    return rules_from_record(decode_value(Path(path).read_bytes()))
