"""Named-input graphs: forward evaluation, gradients, and finite-difference checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..exceptions import ConfigurationError, NumericError, UsageError
from .tensor import Tensor, grad, topological_order


class Graph:
    """A computation over named tensors.

    ``fn`` receives keyword :class:`Tensor` arguments, one per input name, and
    returns either a single Tensor (exposed as output ``"y"``) or a dict of
    named Tensors. Each evaluation traces a fresh node list in topological order.

    >>> g = Graph(lambda x: x * x, inputs=["x"])
    >>> float(evaluate(g, {"x": 3.0})["y"])
    9.0
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]], inputs, name: str = "graph"):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.name = name

    def trace(self, inputs: Mapping[str, object], dtype=None) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        missing = [k for k in self.inputs if k not in inputs]
        if missing:
            raise ConfigurationError(f"{self.name}: unbound inputs {missing}")
        leaves = {}
        for key in self.inputs:
            value = inputs[key]
            if isinstance(value, Tensor):
                leaves[key] = value
            else:
                leaves[key] = Tensor(value, requires_grad=True, name=key, dtype=dtype)
        try:
            out = self.fn(**leaves)
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"{self.name}: {exc}") from exc
        if isinstance(out, Tensor):
            out = {"y": out}
        return leaves, dict(out)

    def nodes(self, inputs: Mapping[str, object]) -> list[Tensor]:
        """Topologically ordered nodes feeding every output."""
        _, outputs = self.trace(inputs)
        order: list[Tensor] = []
        seen: set[int] = set()
        for out in outputs.values():
            for node in _all_nodes(out):
                if id(node) not in seen:
                    seen.add(id(node))
                    order.append(node)
        return order


def _all_nodes(output: Tensor) -> list[Tensor]:
    if output.requires_grad:
        return topological_order(output)
    return [output]


def _check_nodes(graph: Graph, outputs: Mapping[str, Tensor]) -> None:
    for out_name, out in outputs.items():
        for i, node in enumerate(_all_nodes(out)):
            if not np.all(np.isfinite(node.data)):
                label = node.name or node.op
                raise NumericError(
                    f"{graph.name}: non-finite value at node {i} ('{label}') feeding output '{out_name}'"
                )


def evaluate(graph: Graph, inputs: Mapping[str, object], outputs=None, dtype=None) -> dict[str, np.ndarray]:
    """Forward values of the requested outputs (all outputs by default)."""
    _, traced = graph.trace(inputs, dtype=dtype)
    if outputs is not None:
        traced = {k: traced[k] for k in outputs}
    _check_nodes(graph, traced)
    return {k: v.data for k, v in traced.items()}


def gradient(graph: Graph, output: str, inputs: Mapping[str, object], dtype=None) -> dict[str, np.ndarray]:
    """Reverse-mode partial derivatives of a scalar output w.r.t. every grad-requiring input."""
    leaves, traced = graph.trace(inputs, dtype=dtype)
    if output not in traced:
        raise UsageError(f"{graph.name}: no output named '{output}'")
    out = traced[output]
    if out.data.size != 1:
        raise UsageError(f"{graph.name}: output '{output}' has shape {out.shape}, expected a scalar")
    _check_nodes(graph, {output: out})
    names = [k for k, t in leaves.items() if t.requires_grad]
    grads = grad(out, [leaves[k] for k in names])
    return dict(zip(names, grads))


@dataclass
class GradCheckReport:
    """Max relative error per input of reverse-mode vs central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"errors": self.errors, "tolerance": self.tolerance, "checked": self.checked,
                "failures": self.failures, "passed": self.passed}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst coordinate error scaled by the larger of the two gradient magnitudes.

    Scaling per input (not per coordinate) keeps near-zero entries from
    dominating. The scale never drops below ``floor`` so an input whose true
    gradient is zero (e.g. an attention key bias, which softmax cancels) is
    judged on absolute error instead of on the ratio of two rounding noises.
    Exact agreement gives 0.
    """
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if diff == 0.0:
        return 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return diff / scale if scale > 0 else float("inf")


def finite_difference_check(
    graph: Graph,
    inputs: Mapping[str, object],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    output: str = "y",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    check=None,
) -> GradCheckReport:
    """Compare :func:`gradient` against central differences at double precision.

    ``max_coords`` caps how many coordinates per input are perturbed (chosen
    uniformly by ``rng``); the rest are skipped. ``floor`` is passed to
    :func:`relative_error`. ``check`` restricts perturbation to the named
    inputs (all by default).
    """
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in inputs.items()}
    analytic = gradient(graph, output, base)
    rng = rng if rng is not None else np.random.default_rng(0)

    def f(values) -> float:
        _, traced = graph.trace(values)
        return float(traced[output].data)

    report = GradCheckReport(tolerance=tolerance)
    names = graph.inputs if check is None else [k for k in graph.inputs if k in set(check)]
    for key in names:
        x = base[key]
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for j, flat in enumerate(coords):
            idx = np.unravel_index(flat, x.shape)
            orig = x[idx]
            x[idx] = orig + epsilon
            plus = f(base)
            x[idx] = orig - epsilon
            minus = f(base)
            x[idx] = orig
            numeric[j] = (plus - minus) / (2.0 * epsilon)
        report.errors[key] = relative_error(analytic[key].reshape(-1)[coords], numeric, floor)
        report.checked[key] = len(coords)
    return report
