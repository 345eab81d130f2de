"""Gradient integrity harness: every autodiff primitive plus the end-to-end
training loss checked against central finite differences in f64.

Two model variants are exercised: a sequence-fed depth-2/dim-8/heads-2/T=5
predictor (1d rope, SwiGLU, QK-Norm, LayerScale), and an image-fed T=4 model
covering patchify, the patch projection, the positional table, 2d-axial rope
and the GeLU MLP.

The finite-difference side for the model checks holds the prediction targets
fixed at their unperturbed values. The stop-gradient barrier defines the
loss gradient as "targets are constants"; differencing the raw loss would
re-derive the targets from the perturbed patch projection and measure a
different (deliberately discarded) derivative. For parameters that never
touch the target path the two functions coincide.

Two measurement notes. LayerScale in these configs is initialized at 0.8
rather than its training default: with a 1e-5 init the residual-branch
gradients sit at the finite-difference noise floor and the comparison
measures conditioning, not correctness. Second, the model checks normalize
elementwise differences by the gradient tensor's scale instead of per
element: a loss of order one evaluates with ~1e-16 relative rounding, so a
central difference at h=1e-5 resolves derivatives only down to ~1e-11, and
individual elements in near-null directions (QK-Norm invariances) fall below
that regardless of implementation correctness. Primitive checks keep the
stricter per-element contract of ``finite_diff_check``.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import backbone as bb
from . import tensor as T
from .objective import ObjectiveConfig, nepa_loss
from .tensor import GradTape, Tensor, finite_diff_check

TOLERANCE = 1e-4
_H = 1e-5


def _rand(seed: int, shape) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape), dtype=np.float64)


def _weighted_sum(y: Tensor, seed: int) -> Tensor:
    w = Tensor(np.random.default_rng(seed + 7000).normal(size=y.shape), dtype=np.float64)
    return T.tsum(T.mul(y, w))


def primitive_cases() -> dict[str, Callable[[int], float]]:
    """name -> (seed -> max rel error) for every differentiable primitive."""

    def case(builder, shape):
        def run(seed: int) -> float:
            x = _rand(seed, shape)
            return finite_diff_check(lambda v: builder(v, seed), x, h=_H)
        return run

    def matmul_shared(v, seed):
        return T.tsum(T.matmul(v, _rand(seed + 1, (5, 3))))

    def matmul_batched(v, seed):
        return T.tsum(T.matmul(v, _rand(seed + 1, (2, 3, 5, 3))))

    def matmul_rhs(v, seed):
        return T.tsum(T.matmul(_rand(seed + 1, (2, 3, 4, 5)), v))

    def layernorm_affine(v, seed):
        g = _rand(seed + 1, (6,))
        b = _rand(seed + 2, (6,))
        return _weighted_sum(T.layernorm(v, g, b), seed)

    def layernorm_gamma(v, seed):
        x = _rand(seed + 1, (3, 6))
        return _weighted_sum(T.layernorm(x, v, _rand(seed + 2, (6,))), seed)

    def layernorm_beta(v, seed):
        x = _rand(seed + 1, (3, 6))
        return _weighted_sum(T.layernorm(x, _rand(seed + 2, (6,)), v), seed)

    def rope(v, seed):
        angles = np.random.default_rng(seed + 3).normal(size=(4, 3))
        return _weighted_sum(T.rope_rotate(v, np.cos(angles), np.sin(angles)), seed)

    def gather(v, seed):
        idx = np.random.default_rng(seed + 4).integers(0, 6, size=(7,))
        return _weighted_sum(T.gather_rows(v, idx), seed)

    def concat3(v, seed):
        other = _rand(seed + 5, (2, 3))
        return _weighted_sum(T.concat([v, other, v], axis=0), seed)

    cases = {
        "add": case(lambda v, s: _weighted_sum(T.add(v, _rand(s + 1, (4, 5))), s), (4, 5)),
        "add_broadcast": case(lambda v, s: _weighted_sum(T.add(_rand(s + 1, (2, 4, 5)), v), s), (5,)),
        "sub": case(lambda v, s: _weighted_sum(T.sub(v, _rand(s + 1, (4, 5))), s), (4, 5)),
        "mul": case(lambda v, s: _weighted_sum(T.mul(v, _rand(s + 1, (4, 5))), s), (4, 5)),
        "mul_broadcast": case(lambda v, s: _weighted_sum(T.mul(_rand(s + 1, (2, 4, 5)), v), s), (5,)),
        "neg": case(lambda v, s: _weighted_sum(T.neg(v), s), (4, 5)),
        "add_scalar": case(lambda v, s: _weighted_sum(T.add_scalar(v, 1.7), s), (4, 5)),
        "mul_scalar": case(lambda v, s: _weighted_sum(T.mul_scalar(v, -2.3), s), (4, 5)),
        "matmul": case(matmul_shared, (2, 4, 5)),
        "matmul_batched": case(matmul_batched, (2, 3, 4, 5)),
        "matmul_rhs": case(matmul_rhs, (2, 3, 5, 6)),
        "softmax_lastdim": case(lambda v, s: _weighted_sum(T.softmax_lastdim(v), s), (3, 6)),
        "log_softmax_lastdim": case(lambda v, s: _weighted_sum(T.log_softmax_lastdim(v), s), (3, 6)),
        "layernorm": case(lambda v, s: _weighted_sum(T.layernorm(v), s), (3, 6)),
        "layernorm_affine": case(layernorm_affine, (3, 6)),
        "layernorm_gamma": case(layernorm_gamma, (6,)),
        "layernorm_beta": case(layernorm_beta, (6,)),
        "l2_normalize": case(lambda v, s: _weighted_sum(T.l2_normalize(v), s), (3, 6)),
        "gelu": case(lambda v, s: _weighted_sum(T.gelu(v), s), (4, 5)),
        "silu": case(lambda v, s: _weighted_sum(T.silu(v), s), (4, 5)),
        "reshape": case(lambda v, s: _weighted_sum(T.reshape(v, (5, 4)), s), (4, 5)),
        "transpose": case(lambda v, s: _weighted_sum(T.transpose(v, (1, 2, 0)), s), (2, 4, 5)),
        "narrow": case(lambda v, s: _weighted_sum(T.narrow(v, 1, 1, 2), s), (3, 4, 5)),
        "concat": case(concat3, (2, 3)),
        "gather_rows": case(gather, (6, 4)),
        "sum": case(lambda v, s: T.tsum(v), (4, 5)),
        "sum_axis": case(lambda v, s: _weighted_sum(T.tsum(v, axis=1), s), (3, 4, 5)),
        "mean": case(lambda v, s: T.tmean(v), (4, 5)),
        "mean_axis": case(lambda v, s: _weighted_sum(T.tmean(v, axis=0), s), (3, 4, 5)),
        "rope_rotate": case(rope, (2, 2, 4, 6)),
        "patchify": case(lambda v, s: _weighted_sum(bb.patchify(v, 2), s), (2, 3, 4, 4)),
    }
    return cases


def tensorwise_fdiff_error(f: Callable[[Tensor], Tensor], x: Tensor,
                           h: float = _H) -> float:
    """Max |analytic - numeric| over the tensor, relative to the gradient scale.

    Same central differences as ``finite_diff_check``, but the denominator is
    max(|analytic|_inf, |numeric|_inf, 1e-8) for the whole tensor.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    tape.backward(y)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fp = f(Tensor((flat + bump).reshape(x.shape))).item()
        fm = f(Tensor((flat - bump).reshape(x.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.shape)
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def stop_gradient_check(seed: int = 0) -> float:
    """Barrier semantics: d(sum(sg(x) * y))/dx == 0 and /dy == x, exactly."""
    x = _rand(seed, (4, 5))
    y = _rand(seed + 1, (4, 5))
    x.requires_grad = True
    y.requires_grad = True
    with GradTape() as tape:
        out = T.tsum(T.mul(T.stop_gradient(x), y))
    tape.backward(out)
    err_x = float(np.abs(x.grad).max())
    err_y = float(np.abs(y.grad - x.data).max())
    return max(err_x, err_y)


def _seq_model() -> tuple[bb.BackboneConfig, bb.BackboneParams, Tensor]:
    cfg = bb.BackboneConfig(image_size=8, patch_size=4, channels=3, dim=8, depth=2,
                            heads=2, mlp_ratio=2.0, rope_mode="1d",
                            layerscale_init=0.8, mlp_kind="swiglu",
                            use_learnable_posembed=False)
    cfg.validate()
    params = bb.BackboneParams.init(cfg, seed=11).astype(np.float64)
    z = _rand(101, (2, 5, 8))
    return cfg, params, z


def _image_model() -> tuple[bb.BackboneConfig, bb.BackboneParams, Tensor]:
    cfg = bb.BackboneConfig(image_size=8, patch_size=4, channels=3, dim=8, depth=2,
                            heads=2, mlp_ratio=2.0, rope_mode="2d-axial",
                            layerscale_init=0.8, mlp_kind="gelu")
    cfg.validate()
    params = bb.BackboneParams.init(cfg, seed=13).astype(np.float64)
    images = Tensor(np.random.default_rng(103).uniform(size=(2, 3, 8, 8)),
                    dtype=np.float64)
    return cfg, params, images


def _frozen_target_loss(z_input: Tensor, z_target: np.ndarray,
                        params: bb.BackboneParams, cfg: bb.BackboneConfig) -> Tensor:
    h_out, _, _ = bb.predict(z_input, params, cfg)
    return nepa_loss(Tensor(z_target), h_out, ObjectiveConfig())


def model_cases() -> list[tuple[str, Callable[[], float]]]:
    """Named end-to-end checks over every parameter and the inputs."""
    cases: list[tuple[str, Callable[[], float]]] = []

    cfg_s, params_s, z_s = _seq_model()
    z_target_s = z_s.data.copy()

    def seq_param_case(name):
        def run() -> float:
            def f(x):
                saved = params_s.tensors[name]
                params_s.tensors[name] = x
                try:
                    return _frozen_target_loss(z_s, z_target_s, params_s, cfg_s)
                finally:
                    params_s.tensors[name] = saved
            return tensorwise_fdiff_error(f, params_s.tensors[name])
        return run

    for name, _ in params_s.named():
        if name.startswith("patch_proj"):
            continue  # the sequence-fed variant never touches the projection
        cases.append((f"seq_T5.{name}", seq_param_case(name)))
    cases.append(("seq_T5.input_z", lambda: tensorwise_fdiff_error(
        lambda v: _frozen_target_loss(v, z_target_s, params_s, cfg_s), z_s)))

    cfg_i, params_i, images = _image_model()
    z0 = bb.embed(bb.patchify(bb.pixel_norm(images), cfg_i.patch_size), params_i).data.copy()

    def image_loss(x: Tensor, name: str | None) -> Tensor:
        saved = params_i.tensors.get(name) if name else None
        if name:
            params_i.tensors[name] = x
        try:
            imgs = x if name is None else images
            z = bb.embed(bb.patchify(bb.pixel_norm(imgs), cfg_i.patch_size), params_i)
            h_out, _, _ = bb.predict(z, params_i, cfg_i)
            return nepa_loss(Tensor(z0), h_out, ObjectiveConfig())
        finally:
            if name:
                params_i.tensors[name] = saved

    def image_param_case(name):
        return lambda: tensorwise_fdiff_error(
            lambda v: image_loss(v, name), params_i.tensors[name])

    for name, _ in params_i.named():
        cases.append((f"image_T4.{name}", image_param_case(name)))
    cases.append(("image_T4.input_images", lambda: tensorwise_fdiff_error(
        lambda v: image_loss(v, None), images)))
    return cases


def run_all(n_seeds: int = 10) -> list[tuple[str, float]]:
    """Every check as (name, max relative error); pass is err < TOLERANCE."""
    results = []
    for name, runner in sorted(primitive_cases().items()):
        err = max(runner(seed) for seed in range(n_seeds))
        results.append((f"primitive.{name}", err))
    results.append(("primitive.stop_gradient", stop_gradient_check()))
    for name, runner in model_cases():
        results.append((f"model.{name}", runner()))
    return results


def format_report(results: list[tuple[str, float]]) -> tuple[list[str], bool]:
    lines = []
    ok = True
    for name, err in results:
        passed = math.isfinite(err) and err < TOLERANCE
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name:42s} {err:.3e}")
    return lines, ok
