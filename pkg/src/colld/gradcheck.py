"""Finite-difference check cases: every autodiff primitive plus a full masked-contrastive graph.

Each case builder takes a seeded generator and returns ``(graph, inputs)``
with float64 inputs and a scalar output. Non-scalar primitives are reduced
by a fixed random contraction so every output coordinate is exercised.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Graph, GradCheckReport, finite_difference_check, ops
from .data import collate
from .encoder import EncoderConfig, build_encoder, encode
from .exceptions import UsageError
from .features import FeatureSequence
from .losses import DistillConfig, init_heads, total_loss
from .mapping import layer_map
from .masking import MaskSpec, sample_mask


def _contract(y, w):
    return ops.sum(ops.mul(y, w))


def _unary(op, shape=(3, 5), **kw):
    def build(rng):
        x = rng.normal(size=shape)
        out_shape = _probe_shape(op, x, **kw)
        w = rng.normal(size=out_shape)
        return Graph(lambda x: _contract(op(x, **kw), w), ["x"], name=op.__name__), {"x": x}
    return build


def _probe_shape(op, *args, **kw):
    from .autodiff import Tensor
    return op(*[Tensor(a) for a in args], **kw).shape


def _binary(op, a_shape, b_shape):
    def build(rng):
        a, b = rng.normal(size=a_shape), rng.normal(size=b_shape)
        w = rng.normal(size=_probe_shape(op, a, b))
        return Graph(lambda a, b: _contract(op(a, b), w), ["a", "b"], name=op.__name__), {"a": a, "b": b}
    return build


def _scale(rng):
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))
    c = float(rng.uniform(-2, 2))
    return Graph(lambda x: _contract(ops.scale(x, c), w), ["x"], name="scale"), {"x": x}


def _layer_norm(rng):
    x = rng.normal(size=(2, 4, 6)) * rng.uniform(0.5, 3.0)
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(2, 4, 6))
    return (Graph(lambda x, gamma, beta: _contract(ops.layer_norm(x, gamma, beta), w), ["x", "gamma", "beta"],
                  name="layer_norm"), {"x": x, "gamma": gamma, "beta": beta})


def _depthwise_conv(rng):
    x = rng.normal(size=(2, 7, 3))
    k = int(rng.choice([1, 3, 5]))
    weight, bias = rng.normal(size=(k, 3)), rng.normal(size=3)
    w = rng.normal(size=(2, 7, 3))
    return (Graph(lambda x, weight, bias: _contract(ops.depthwise_conv1d(x, weight, bias), w),
                  ["x", "weight", "bias"], name="depthwise_conv1d"), {"x": x, "weight": weight, "bias": bias})


def _cosine(rng):
    u, v = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    w = rng.normal(size=5)
    return Graph(lambda u, v: _contract(ops.cosine(u, v), w), ["u", "v"], name="cosine"), {"u": u, "v": v}


def _embedding(rng):
    table = rng.normal(size=(6, 4))
    ids = rng.integers(0, 6, size=(3, 5))
    w = rng.normal(size=(3, 5, 4))
    return Graph(lambda table: _contract(ops.embedding(table, ids), w), ["table"], name="embedding"), {"table": table}


def _getitem(rng):
    x = rng.normal(size=(5, 4))
    rows = rng.integers(0, 5, size=6)  # repeats exercise gradient accumulation
    w = rng.normal(size=(6, 4))
    return Graph(lambda x: _contract(ops.getitem(x, rows), w), ["x"], name="getitem"), {"x": x}


def _reduce(op):
    def build(rng):
        x = rng.normal(size=(3, 4, 2))
        axis = int(rng.integers(0, 3))
        w = rng.normal(size=_probe_shape(op, x, axis=axis))
        return Graph(lambda x: _contract(op(x, axis=axis), w), ["x"], name=op.__name__), {"x": x}
    return build


def _reshape(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 6))
    return Graph(lambda x: _contract(ops.reshape(x, (2, 6)), w), ["x"], name="reshape"), {"x": x}


def _transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    axes = tuple(rng.permutation(3))
    w = rng.normal(size=tuple(x.shape[a] for a in axes))
    return Graph(lambda x: _contract(ops.transpose(x, axes), w), ["x"], name="transpose"), {"x": x}


PRIMITIVE_CASES = {
    "add": _binary(ops.add, (4, 3), (3,)),
    "sub": _binary(ops.sub, (2, 4, 3), (4, 3)),
    "mul": _binary(ops.mul, (4, 3), (4, 3)),
    "scale": _scale,
    "matmul": _binary(ops.matmul, (2, 4, 3), (3, 5)),
    "matmul_batched": _binary(ops.matmul, (2, 4, 3), (2, 3, 5)),
    "sum": _reduce(ops.sum),
    "mean": _reduce(ops.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem,
    "embedding": _embedding,
    "softmax": _unary(ops.softmax, (3, 5)),
    "log_softmax": _unary(ops.log_softmax, (3, 5)),
    "logsumexp": _unary(ops.logsumexp, (3, 5)),
    "layer_norm": _layer_norm,
    "depthwise_conv1d": _depthwise_conv,
    "glu": _unary(ops.glu, (3, 8)),
    "swish": _unary(ops.swish, (3, 5)),
    "cosine": _cosine,
}

TOY_STUDENT = EncoderConfig(layers=2, dim=8, ffn=16, heads=2, conv_kernel=3, input_dim=6)
TOY_TEACHER = EncoderConfig(layers=3, dim=8, ffn=16, heads=2, conv_kernel=3, input_dim=6)


def masked_contrastive_case(rng: np.random.Generator, loss_kind: str = "contrastive"):
    """Whole student forward plus projected contrastive loss on a padded 2-utterance batch.

    Inputs are every student parameter and projection head; masks,
    distractors and the teacher targets are held fixed.
    """
    seed = int(rng.integers(2**31))
    student = build_encoder(TOY_STUDENT, seed=seed, dtype=np.float64)
    teacher = build_encoder(TOY_TEACHER, seed=seed + 1, dtype=np.float64)
    lengths = (12, 9)
    batch = collate([(FeatureSequence(rng.normal(size=(n, 6)).astype(np.float32)), None) for n in lengths])
    masks = []
    for n in lengths:
        m = sample_mask(n, 0.3, 3, rng)
        masks.append(m if len(m) >= 2 else MaskSpec(n, np.arange(3), 0.3, 3))
    lmap = layer_map(TOY_STUDENT.layers, TOY_TEACHER.layers)
    cfg = DistillConfig(loss_kind=loss_kind, temperature=0.1, num_distractors=4, total_steps=1, warmup_steps=1)
    t_taps, _ = encode(teacher, batch.features, batch.lengths, None, lmap.teacher, "ffn2")
    targets = {k: v.data for k, v in t_taps.items()}
    masked = np.stack([m.as_bool(batch.features.shape[1]) for m in masks])
    heads = init_heads(lmap, TOY_STUDENT.dim, TOY_TEACHER.dim, seed, dtype=np.float64)
    dseed = int(rng.integers(2**31))
    inputs = {n: np.array(student.params[n], dtype=np.float64) for n in student.params}
    inputs.update(heads)
    head_names = set(heads)

    def fn(**p):
        s_params = {n: t for n, t in p.items() if n not in head_names}
        h_params = {n: t for n, t in p.items() if n in head_names}
        s_taps, _ = encode(student, batch.features, batch.lengths, masked, None, "ffn2", params=s_params)
        loss, _ = total_loss(s_taps, targets, h_params, lmap, masks, cfg, np.random.default_rng(dseed),
                             lengths=batch.lengths)
        return loss

    return Graph(fn, list(inputs), name=f"masked_{loss_kind}"), inputs


def run_case(name: str, seed: int, epsilon: float | None = None, tolerance: float = 1e-4,
             max_coords: int | None = None, max_inputs: int | None = None) -> GradCheckReport:
    """Check one case at one seed.

    The full-graph cases default to perturbing 2 coordinates each of 8
    randomly chosen inputs with epsilon 1e-4; primitives perturb every
    coordinate with epsilon 1e-5.
    """
    rng = np.random.default_rng([seed, 7])
    if name in PRIMITIVE_CASES:
        graph, inputs = PRIMITIVE_CASES[name](rng)
        epsilon = 1e-5 if epsilon is None else epsilon
    elif name in ("masked_contrastive", "masked_l2"):
        graph, inputs = masked_contrastive_case(rng, loss_kind=name.split("_", 1)[1])
        epsilon = 1e-4 if epsilon is None else epsilon
        max_coords = 2 if max_coords is None else max_coords
        max_inputs = 8 if max_inputs is None else max_inputs
    else:
        raise UsageError(f"unknown grad-check case {name!r}; choose from {case_names()}")
    check = None
    if max_inputs is not None and max_inputs < len(graph.inputs):
        check = [graph.inputs[i] for i in sorted(rng.choice(len(graph.inputs), size=max_inputs, replace=False))]
    return finite_difference_check(graph, inputs, epsilon=epsilon, tolerance=tolerance, max_coords=max_coords,
                                   rng=rng, check=check)


def case_names() -> list[str]:
    return [*PRIMITIVE_CASES, "masked_contrastive", "masked_l2"]
