"""Unrolled variable-splitting network with a shared residual CNN.

Each of ``T`` unrolls applies the regularizer proximal step (a residual CNN
acting on all echoes jointly, complex images carried as real/imaginary
channel pairs) and then the data-fidelity update

    x = (E^H W E + mu I)^{-1} (E^H W y + mu z)

solved per echo by a fixed number of CG steps through the Toeplitz normal
operator. Autograd records the whole computation, CG steps included, so
gradients are those of the truncated solver actually run.
"""
from dataclasses import dataclass, field
import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TapeMismatchError
from .ssdu import mixed_loss

__all__ = [
    "ModelParams",
    "DfContext",
    "Tape",
    "init_params",
    "regularizer_prox",
    "normal_apply",
    "cg_solve",
    "unrolled_forward",
    "record",
    "backward",
    "replay",
    "loss_on_lambda",
]

REAL_DTYPES = {"single": torch.float32, "double": torch.float64}
COMPLEX_DTYPES = {"single": torch.complex64, "double": torch.complex128}


@dataclass
class ModelParams:
    """Shared CNN weights, log data-fidelity penalty and unroll settings."""

    conv_weights: list  # [(weight, bias), ...] torch tensors
    mu_log: torch.Tensor
    unroll_count: int = 10
    cg_iterations: int = 15
    echo_count: int = 6

    @property
    def mu(self):
        return torch.exp(self.mu_log)

    def tensors(self):
        out = []
        for w, b in self.conv_weights:
            out.extend([w, b])
        out.append(self.mu_log)
        return out

    def names(self):
        out = []
        for i in range(len(self.conv_weights)):
            out.extend([f"conv{i}.weight", f"conv{i}.bias"])
        out.append("mu_log")
        return out

    def to_arrays(self):
        """Name -> float32 numpy array, for checkpointing."""
        return {n: t.detach().cpu().numpy().astype(np.float32) for n, t in zip(self.names(), self.tensors())}

    @classmethod
    def from_arrays(cls, arrays, unroll_count=10, cg_iterations=15, precision="single"):
        dtype = REAL_DTYPES[precision]
        n_layers = sum(1 for k in arrays if k.endswith(".weight"))
        convs = []
        for i in range(n_layers):
            w = torch.tensor(np.asarray(arrays[f"conv{i}.weight"]), dtype=dtype, requires_grad=True)
            b = torch.tensor(np.asarray(arrays[f"conv{i}.bias"]), dtype=dtype, requires_grad=True)
            convs.append((w, b))
        mu_log = torch.tensor(float(np.asarray(arrays["mu_log"]).reshape(())), dtype=dtype,
                              requires_grad=True)
        echo_count = convs[0][0].shape[1] // 2
        return cls(convs, mu_log, unroll_count, cg_iterations, echo_count)

    def astype(self, precision):
        return ModelParams.from_arrays(
            {n: t.detach().cpu().numpy() for n, t in zip(self.names(), self.tensors())},
            self.unroll_count, self.cg_iterations, precision)


def init_params(echo_count, depth=5, width=32, kernel_size=3, seed=0, mu_init=0.05,
                unroll_count=10, cg_iterations=15, precision="single"):
    """Seeded initial parameters.

    Hidden layers draw from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; the final
    layer starts at zero so the proximal step is the identity.
    """
    if depth < 2:
        raise ValueError("depth must be >= 2")
    rng = np.random.default_rng(seed)
    dtype = REAL_DTYPES[precision]
    chans = [2 * echo_count] + [width] * (depth - 1) + [2 * echo_count]
    convs = []
    for i in range(depth):
        c_in, c_out = chans[i], chans[i + 1]
        shape = (c_out, c_in, kernel_size, kernel_size)
        if i == depth - 1:
            w = np.zeros(shape)
            b = np.zeros(c_out)
        else:
            bound = 1.0 / math.sqrt(c_in * kernel_size * kernel_size)
            w = rng.uniform(-bound, bound, size=shape)
            b = rng.uniform(-bound, bound, size=c_out)
        convs.append((torch.tensor(w, dtype=dtype, requires_grad=True),
                      torch.tensor(b, dtype=dtype, requires_grad=True)))
    mu_log = torch.tensor(math.log(mu_init), dtype=dtype, requires_grad=True)
    return ModelParams(convs, mu_log, unroll_count, cg_iterations, echo_count)


def _to_channels(x):
    return torch.cat([x.real, x.imag], dim=0)[None]


def _from_channels(h, echoes):
    h = h[0]
    return torch.complex(h[:echoes], h[echoes:])


def regularizer_prox(params, x):
    """Residual CNN on stacked real/imaginary echo channels; ``x`` is (E, H, W)."""
    echoes = x.shape[0]
    if 2 * echoes != params.conv_weights[0][0].shape[1]:
        raise ValueError(
            f"input has {echoes} echoes but the network expects "
            f"{params.conv_weights[0][0].shape[1] // 2}"
        )
    h0 = _to_channels(x)
    h = h0
    last = len(params.conv_weights) - 1
    for i, (w, b) in enumerate(params.conv_weights):
        h = F.conv2d(h, w, b, padding=w.shape[-1] // 2)
        if i < last:
            h = F.relu(h)
    return _from_channels(h0 + h, echoes)


def normal_apply(kernel_m, maps, x):
    """Toeplitz ``E^H W E x``; ``kernel_m`` is (2H, 2W), ``maps`` (C, H, W)."""
    h, w = x.shape[-2:]
    coil_imgs = maps[:, None] * x[None]
    freq = torch.fft.fft2(coil_imgs, s=tuple(kernel_m.shape))
    conv = torch.fft.ifft2(kernel_m * freq)[..., :h, :w]
    return (maps.conj()[:, None] * conv).sum(dim=0)


def _vdot(a, b):
    return (a.conj() * b).sum(dim=(-2, -1), keepdim=True).real


def _safe(d):
    return torch.where(d == 0, torch.ones_like(d), d)


def cg_solve(kernel_m, maps, b, x0, mu, iterations):
    """Exactly ``iterations`` CG steps on ``(T + mu I) x = b``, per echo."""
    def op(v):
        return normal_apply(kernel_m, maps, v) + mu * v

    x = x0
    r = b - op(x)
    p = r
    rs = _vdot(r, r)
    for _ in range(iterations):
        ap = op(p)
        alpha = rs / _safe(_vdot(p, ap))
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = _vdot(r, r)
        p = r + (rs_new / _safe(rs)) * p
        rs = rs_new
    return x


@dataclass
class DfContext:
    """Everything the data-fidelity block needs for one sample subset."""

    kernel_m: torch.Tensor
    maps: torch.Tensor
    rhs: torch.Tensor

    @classmethod
    def from_numpy(cls, kernel, maps, rhs, precision="single"):
        cdt = COMPLEX_DTYPES[precision]
        m = getattr(kernel, "m", kernel)
        s = getattr(maps, "maps", maps)
        return cls(torch.as_tensor(np.array(m), dtype=cdt),
                   torch.as_tensor(np.array(s), dtype=cdt),
                   torch.as_tensor(np.array(rhs), dtype=cdt))


def unrolled_forward(params, gridded_input, ctx, unroll_count=None, warm_start=True):
    """``x0 = gridded_input``; ``T`` times: ``z = prox(x)``, ``x = DF(z)``.

    ``z`` is restricted to the coil-map support. Outside it the encoding
    operator is blind, so neither data fidelity nor the held-out loss would
    otherwise constrain what the network writes there.
    """
    t_count = params.unroll_count if unroll_count is None else unroll_count
    if t_count < 1:
        raise ValueError("unroll_count must be >= 1")
    mu = params.mu
    support = ((ctx.maps.abs() ** 2).sum(dim=0) > 0).to(gridded_input.real.dtype)
    x = gridded_input
    for _ in range(t_count):
        z = regularizer_prox(params, x) * support
        x0 = z if warm_start else torch.zeros_like(z)
        x = cg_solve(ctx.kernel_m, ctx.maps, ctx.rhs + mu * z, x0, mu, params.cg_iterations)
    return x


def loss_on_lambda(recon, lambda_kernel_m, maps, target):
    """Torch version of the image-domain held-out loss."""
    return mixed_loss(normal_apply(lambda_kernel_m, maps, recon), target)


@dataclass
class Tape:
    """A recorded forward computation and the leaves it depends on.

    ``fn(*inputs)`` reproduces ``output``; ``leaves`` are the tensors gradients
    are taken with respect to (by default the model parameters).
    """

    fn: object
    inputs: tuple
    output: torch.Tensor
    leaves: list
    meta: dict = field(default_factory=dict)


def record(fn, *inputs, leaves):
    """Run ``fn(*inputs)`` with gradient tracking and return a :class:`Tape`."""
    with torch.enable_grad():
        out = fn(*inputs)
    return Tape(fn, inputs, out, list(leaves))


def replay(tape):
    """Re-run the recorded computation; raise if outputs differ bitwise."""
    with torch.no_grad():
        again = tape.fn(*tape.inputs)
    if not torch.equal(again, tape.output.detach()):
        raise TapeMismatchError("replayed forward pass does not match the recorded output")
    return again


def backward(tape, loss_gradient, check_replay=False):
    """Reverse-mode gradients of the tape's leaves.

    ``loss_gradient`` is ``dL/dRe(out) + i dL/dIm(out)`` for complex outputs
    (plain ``dL/dout`` for real ones). Returns one tensor per leaf; leaves
    the output does not depend on get zeros.
    """
    if check_replay:
        replay(tape)
    grads = torch.autograd.grad(
        tape.output, tape.leaves, grad_outputs=loss_gradient,
        retain_graph=True, allow_unused=True,
    )
    return [torch.zeros_like(l) if g is None else g for g, l in zip(grads, tape.leaves)]
