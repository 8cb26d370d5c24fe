"""Per-token progress labels from K-way instruction segmentations.

A token in the j-th of K segments (1-based) is labelled j / K. Segments and
sub-paths are half-open ``[start, end)`` spans; segment spans index the
content tokens (BOS/EOS excluded), sub-path spans index trajectory nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from .errors import AlignmentError, ValidationError
from .vocab import BOS, EOS

Span = Tuple[int, int]


@dataclass
class InstructionRecord:
    tokens: List  # BOS + content + EOS
    segments: List[Span]
    progress: List[float]  # aligned with ``tokens``
    sub_paths: Optional[List[Span]] = None
    extras: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.segments)

    @property
    def content(self) -> List:
        return self.tokens[1:-1]

    @property
    def content_progress(self) -> List[float]:
        return self.progress[1:-1]


def check_spans(spans: Sequence[Span], total: int, what: str = "segment",
                error=ValidationError) -> None:
    """Spans must be non-empty, ordered, gap-free and cover ``[0, total)``."""
    if not spans:
        raise error(f"no {what}s given")
    cursor = 0
    for j, (start, end) in enumerate(spans):
        if start != cursor:
            kind = "gap" if start > cursor else "overlap"
            raise error(f"{what} {j} [{start}, {end}) leaves a {kind} at {cursor}")
        if end <= start:
            raise error(f"{what} {j} [{start}, {end}) is empty")
        cursor = end
    if cursor != total:
        raise error(f"{what}s end at {cursor} but {total} items need covering")


def assign_progress(content_tokens: Sequence, segments: Sequence[Span],
                    sub_paths: Optional[Sequence[Span]] = None,
                    bos=BOS, eos=EOS) -> InstructionRecord:
    segments = [tuple(map(int, s)) for s in segments]
    check_spans(segments, len(content_tokens))
    K = len(segments)
    labels = []
    for j, (start, end) in enumerate(segments, start=1):
        labels.extend([float(Fraction(j, K))] * (end - start))
    progress = [float(Fraction(1, K))] + labels + [1.0]
    return InstructionRecord(
        tokens=[bos, *content_tokens, eos],
        segments=segments,
        progress=progress,
        sub_paths=[tuple(map(int, s)) for s in sub_paths] if sub_paths is not None else None,
    )


def validate_alignment(record: InstructionRecord, trajectory_len: int) -> None:
    if record.sub_paths is None:
        raise AlignmentError("record carries no sub-paths")
    if len(record.sub_paths) != len(record.segments):
        raise AlignmentError(
            f"{len(record.segments)} segments but {len(record.sub_paths)} sub-paths")
    check_spans(record.sub_paths, trajectory_len, "sub-path", AlignmentError)
    check_spans(record.segments, len(record.content), "segment", AlignmentError)
