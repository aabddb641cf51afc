"""Student-to-teacher layer assignment."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .exceptions import UsageError


@dataclass(frozen=True)
class LayerMap:
    pairs: tuple[tuple[int, int], ...]
    student_layers: int
    teacher_layers: int

    @property
    def student(self) -> list[int]:
        return [s for s, _ in self.pairs]

    @property
    def teacher(self) -> list[int]:
        return [t for _, t in self.pairs]

    def to_list(self) -> list[list[int]]:
        return [list(p) for p in self.pairs]


def _round_half_away(x: Fraction) -> int:
    whole, rem = divmod(abs(x.numerator), x.denominator)
    if 2 * rem >= x.denominator:
        whole += 1
    return whole if x >= 0 else -whole


def layer_map(student_layers: int, teacher_layers: int) -> LayerMap:
    """Spread ``student_layers`` targets uniformly over ``teacher_layers`` (1-based).

    Student layer ``l`` predicts teacher layer
    ``round((l - 1) * (L_T - 1) / (L_S - 1)) + 1``; ties round away from zero.
    The ratio is kept exact so no tie is lost to float error.
    """
    ls, lt = int(student_layers), int(teacher_layers)
    if ls < 2:
        raise UsageError(f"student needs at least 2 layers for the mapping, got {ls}")
    if ls > lt:
        raise UsageError(f"student has more layers ({ls}) than teacher ({lt})")
    pairs = tuple((l, _round_half_away(Fraction((l - 1) * (lt - 1), ls - 1)) + 1) for l in range(1, ls + 1))
    return LayerMap(pairs, ls, lt)
