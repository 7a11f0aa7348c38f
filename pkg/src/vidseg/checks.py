"""Finite-difference verification suite over ops, blocks, and losses.

Each case builds a fresh random scalar-valued function of one packed input
tensor and compares analytic gradients against central differences. The
CLI and the acceptance tests share this inventory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import ContrastiveItem, contrastive_loss
from .gradcheck import finite_difference_check
from .matching import classification_loss, dice_loss, mask_ce_loss
from .nn import MultiHeadAttention
from .refiner import TemporalDecoderBlock
from .tracker import TDBlock, rca

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    scope: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Shift values off the origin so kinks (relu) stay FD-differentiable."""
    return x + np.sign(np.where(x == 0, 1.0, x)) * margin


def _readout(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional making any output a generic scalar."""
    r = ad.constant(rng.normal(size=out.shape))
    return ad.reduce_sum(ad.mul(out, r))


def op_cases(rng: np.random.Generator):
    n, m, c = 3, 4, 5

    def pair(op):
        def make():
            point = Tensor(rng.normal(size=(2, n, c)))
            readout = ad.constant(rng.normal(size=(n, c)))

            def fn(x):
                a = ad.reshape(ad.slice_axis(x, 0, 0, 1), (n, c))
                b = ad.reshape(ad.slice_axis(x, 0, 1, 2), (n, c))
                return ad.reduce_sum(ad.mul(op(a, b), readout))

            return fn, point

        return make

    def single(op, transform=None, out_shape=None):
        def make():
            raw = rng.normal(size=(n, c))
            point = Tensor(transform(raw) if transform else raw)
            readout = ad.constant(rng.normal(size=out_shape or (n, c)))

            def fn(x):
                return ad.reduce_sum(ad.mul(op(x), readout))

            return fn, point

        return make

    cases = {
        "add": pair(ad.add),
        "sub": pair(ad.sub),
        "mul": pair(ad.mul),
        "relu": single(ad.relu, _away_from_zero),
        "sigmoid": single(ad.sigmoid),
        "exp": single(lambda x: ad.exp(ad.scale(x, 0.5))),
        "log": single(ad.log, lambda x: np.abs(x) + 0.5),
        "softmax": single(lambda x: ad.softmax(x, axis=-1)),
        "l2_normalize": single(ad.l2_normalize, _away_from_zero),
        "scale": single(lambda x: ad.scale(x, -1.7)),
        "transpose": single(lambda x: ad.transpose(x), out_shape=(c, n)),
        "reshape": single(lambda x: ad.reshape(x, (c, n)), out_shape=(c, n)),
    }

    def div_case():
        point = Tensor(rng.normal(size=(2, n, c)))
        readout = ad.constant(rng.normal(size=(n, c)))

        def fn(x):
            a = ad.reshape(ad.slice_axis(x, 0, 0, 1), (n, c))
            b_raw = ad.reshape(ad.slice_axis(x, 0, 1, 2), (n, c))
            b = ad.add(ad.sigmoid(b_raw), ad.constant(np.full((n, c), 0.5)))
            return ad.reduce_sum(ad.mul(ad.div(a, b), readout))

        return fn, point

    cases["div"] = div_case

    def matmul_case():
        point = Tensor(rng.normal(size=(n * c + c * m,)))
        readout = ad.constant(rng.normal(size=(n, m)))

        def fn(x):
            a = ad.reshape(ad.slice_axis(x, 0, 0, n * c), (n, c))
            b = ad.reshape(ad.slice_axis(x, 0, n * c, n * c + c * m), (c, m))
            return ad.reduce_sum(ad.mul(ad.matmul(a, b), readout))

        return fn, point

    cases["matmul"] = matmul_case

    def batched_matmul_case():
        b = 2
        point = Tensor(rng.normal(size=(b * n * c + b * c * m,)))
        readout = ad.constant(rng.normal(size=(b, n, m)))

        def fn(x):
            lhs = ad.reshape(ad.slice_axis(x, 0, 0, b * n * c), (b, n, c))
            rhs = ad.reshape(ad.slice_axis(x, 0, b * n * c, x.size), (b, c, m))
            return ad.reduce_sum(ad.mul(ad.matmul(lhs, rhs), readout))

        return fn, point

    cases["matmul_batched"] = batched_matmul_case

    def concat_slice_case():
        point = Tensor(rng.normal(size=(n, c)))
        readout = ad.constant(rng.normal(size=(n, c + 2)))

        def fn(x):
            left = ad.slice_axis(x, 1, 0, 2)
            out = ad.concat([x, left], axis=1)
            return ad.reduce_sum(ad.mul(out, readout))

        return fn, point

    cases["concat_slice"] = concat_slice_case

    def take_rows_case():
        point = Tensor(rng.normal(size=(n, c)))
        idx = [2, 0, 2]
        readout = ad.constant(rng.normal(size=(3, c)))

        def fn(x):
            return ad.reduce_sum(ad.mul(ad.take_rows(x, idx), readout))

        return fn, point

    cases["take_rows"] = take_rows_case

    def layer_norm_case():
        point = Tensor(np.concatenate([rng.normal(size=n * c), rng.normal(size=2 * c)]))
        readout = ad.constant(rng.normal(size=(n, c)))

        def fn(x):
            a = ad.reshape(ad.slice_axis(x, 0, 0, n * c), (n, c))
            gamma = ad.slice_axis(x, 0, n * c, n * c + c)
            beta = ad.slice_axis(x, 0, n * c + c, n * c + 2 * c)
            return ad.reduce_sum(ad.mul(ad.layer_norm(a, gamma, beta), readout))

        return fn, point

    cases["layer_norm"] = layer_norm_case

    def linear_case():
        point = Tensor(np.concatenate([rng.normal(size=n * c), rng.normal(size=c * m + m)]))
        readout = ad.constant(rng.normal(size=(n, m)))

        def fn(x):
            a = ad.reshape(ad.slice_axis(x, 0, 0, n * c), (n, c))
            w = ad.reshape(ad.slice_axis(x, 0, n * c, n * c + c * m), (c, m))
            b = ad.slice_axis(x, 0, n * c + c * m, x.size)
            return ad.reduce_sum(ad.mul(ad.linear(a, w, b), readout))

        return fn, point

    cases["linear"] = linear_case

    def conv1d_case():
        t, k = 5, 3
        point = Tensor(
            np.concatenate([rng.normal(size=t * c), rng.normal(size=k * c * c + c)])
        )
        readout = ad.constant(rng.normal(size=(t, c)))

        def fn(x):
            a = ad.reshape(ad.slice_axis(x, 0, 0, t * c), (t, c))
            w = ad.reshape(ad.slice_axis(x, 0, t * c, t * c + k * c * c), (k, c, c))
            b = ad.slice_axis(x, 0, t * c + k * c * c, x.size)
            return ad.reduce_sum(ad.mul(ad.conv1d(a, w, b), readout))

        return fn, point

    cases["conv1d"] = conv1d_case

    def bce_case():
        point = Tensor(_away_from_zero(rng.normal(size=(n, c))))
        target = ad.constant((rng.uniform(size=(n, c)) < 0.5).astype(float))
        readout = ad.constant(rng.normal(size=(n, c)))

        def fn(x):
            return ad.reduce_sum(ad.mul(ad.bce_with_logits(x, target), readout))

        return fn, point

    cases["bce_with_logits"] = bce_case

    def reduce_case(op, axis):
        def make():
            point = Tensor(rng.normal(size=(n, c)))
            shape = () if axis is None else ((c,) if axis == 0 else (n,))
            readout = ad.constant(rng.normal(size=shape))

            def fn(x):
                out = op(x, axis)
                return ad.reduce_sum(ad.mul(out, readout)) if shape else out

            return fn, point

        return make

    cases["sum_all"] = reduce_case(ad.reduce_sum, None)
    cases["sum_axis"] = reduce_case(ad.reduce_sum, 0)
    cases["mean_all"] = reduce_case(ad.reduce_mean, None)
    cases["mean_axis"] = reduce_case(ad.reduce_mean, 1)
    return cases


def _split(x: Tensor, sizes: list[int], shapes: list[tuple]) -> list[Tensor]:
    parts = []
    offset = 0
    for size, shape in zip(sizes, shapes):
        parts.append(ad.reshape(ad.slice_axis(x, 0, offset, offset + size), shape))
        offset += size
    return parts


def _pack_params(tensors: list[Tensor], rng) -> tuple[np.ndarray, list[int], list[tuple]]:
    values = np.concatenate([t.data.reshape(-1) for t in tensors])
    sizes = [t.size for t in tensors]
    shapes = [t.shape for t in tensors]
    return values, sizes, shapes


def _assign(tensors: list[Tensor], parts: list[Tensor]) -> None:
    for t, part in zip(tensors, parts):
        t.data = part.data
        t.requires_grad = part.requires_grad
        t._op = "alias"
        t._parents = (part,)
        t._backward = lambda g: (g,)


def block_cases(rng: np.random.Generator):
    def rca_case():
        n, c, heads = 3, 4, 2
        mha = MultiHeadAttention(np.random.default_rng(rng.integers(1 << 31)), c, heads)
        weight_list = list(mha.params("w").values())
        packed, sizes, shapes = _pack_params(weight_list, rng)
        inputs = rng.normal(size=4 * n * c)
        point = Tensor(np.concatenate([inputs, packed]))
        readout = ad.constant(rng.normal(size=(n, c)))

        def fn(x):
            parts = _split(
                x,
                [n * c] * 4 + sizes,
                [(n, c)] * 4 + shapes,
            )
            id_v, q, k, v = parts[:4]
            _assign(weight_list, parts[4:])
            return ad.reduce_sum(ad.mul(rca(id_v, q, k, v, mha), readout))

        return fn, point

    def td_case():
        n, c, heads = 3, 4, 2
        block = TDBlock(np.random.default_rng(rng.integers(1 << 31)), c, heads)
        weight_list = list(block.params("b").values())
        packed, sizes, shapes = _pack_params(weight_list, rng)
        inputs = rng.normal(size=3 * n * c)
        point = Tensor(np.concatenate([inputs, packed]))
        readout = ad.constant(rng.normal(size=(n, c)))

        def fn(x):
            parts = _split(x, [n * c] * 3 + sizes, [(n, c)] * 3 + shapes)
            initial, refs, kv = parts[:3]
            _assign(weight_list, parts[3:])
            return ad.reduce_sum(ad.mul(block(initial, refs, kv), readout))

        return fn, point

    def temporal_case():
        n, t, c, heads = 2, 3, 4, 2
        block = TemporalDecoderBlock(np.random.default_rng(rng.integers(1 << 31)), c, heads)
        # Zero-initialized residual branches hide gradient bugs; randomize.
        reinit = np.random.default_rng(rng.integers(1 << 31))
        for tensor in block.params("b").values():
            tensor.data = reinit.normal(0.0, 0.3, size=tensor.shape)
        weight_list = list(block.params("b").values())
        packed, sizes, shapes = _pack_params(weight_list, rng)
        inputs = rng.normal(size=2 * n * t * c)
        point = Tensor(np.concatenate([inputs, packed]))
        readout = ad.constant(rng.normal(size=(n, t, c)))
        pe = np.random.default_rng(7).normal(size=(t, c))

        def fn(x):
            parts = _split(
                x, [n * t * c, n * t * c] + sizes, [(n, t, c), (t, n, c)] + shapes
            )
            xin, q_seg = parts[:2]
            _assign(weight_list, parts[2:])
            return ad.reduce_sum(ad.mul(block(xin, q_seg, pe), readout))

        return fn, point

    return {"rca_block": rca_case, "td_block": td_case, "temporal_decoder_block": temporal_case}


def loss_cases(rng: np.random.Generator):
    def dice_case():
        gt = (rng.uniform(size=(2, 64)) < 0.5).astype(float)
        point = Tensor(rng.normal(size=(2, 64)))
        return (lambda x: dice_loss(x, gt)), point

    def mask_ce_case():
        gt = (rng.uniform(size=(2, 64)) < 0.5).astype(float)
        point = Tensor(_away_from_zero(rng.normal(size=(2, 64))))
        return (lambda x: mask_ce_loss(x, gt)), point

    def cls_case():
        targets = rng.integers(0, 4, size=5)
        point = Tensor(rng.normal(size=(5, 4)))
        return (lambda x: classification_loss(x, targets)), point

    def contrastive_case():
        c = 6
        n_pos, n_neg = 2, 3
        point = Tensor(rng.normal(size=((1 + n_pos + n_neg) * c,)) * 0.5)

        def fn(x):
            rows = _split(
                x,
                [c] * (1 + n_pos + n_neg),
                [(c,)] * (1 + n_pos + n_neg),
            )
            item = ContrastiveItem(rows[0], rows[1 : 1 + n_pos], rows[1 + n_pos :])
            return contrastive_loss([item])

        return fn, point

    return {
        "dice_loss": dice_case,
        "mask_ce_loss": mask_ce_case,
        "classification_loss": cls_case,
        "contrastive_loss": contrastive_case,
    }


SCOPES = {"ops": op_cases, "blocks": block_cases, "losses": loss_cases}


def run_suite(
    scope: str = "all",
    points: int = 5,
    tolerance: float = DEFAULT_TOL,
    step: float = DEFAULT_STEP,
    seed: int = 0,
) -> list[CheckResult]:
    scopes = list(SCOPES) if scope == "all" else [scope]
    if any(s not in SCOPES for s in scopes):
        raise ValueError(f"unknown scope {scope!r}; expected one of {list(SCOPES)} or 'all'")
    scope_salt = {"ops": 1, "blocks": 2, "losses": 3}
    results = []
    for scope_name in scopes:
        rng = np.random.default_rng(np.random.SeedSequence((seed, scope_salt[scope_name])))
        for name, make in SCOPES[scope_name](rng).items():
            worst = 0.0
            for _ in range(points):
                fn, point = make()
                worst = max(worst, finite_difference_check(fn, point, step))
            results.append(CheckResult(name, scope_name, worst, tolerance))
    return results
