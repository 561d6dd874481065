from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Verdict:
    """Accept/reject outcome; a rejection carries one or more reasons.

    Truthiness follows ``ok`` so call sites can write ``if verify_x(...):``.
    """

    ok: bool
    reasons: tuple[str, ...] = ()

    @classmethod
    def accept(cls) -> "Verdict":
        return cls(True)

    @classmethod
    def reject(cls, *reasons: str) -> "Verdict":
        return cls(False, tuple(reasons))

    @property
    def reason(self) -> str | None:
        return "; ".join(self.reasons) if self.reasons else None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "accepted" if self.ok else f"rejected({self.reason})"
