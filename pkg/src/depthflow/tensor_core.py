"""
Differentiable numerical kernels shared by every network module.

All kernels operate on 4-D tensors laid out as ``[batch, channels, height,
width]``.  Flow fields carry the horizontal displacement in channel 0 and the
vertical displacement in channel 1, both in pixels of the map they belong to.
"""

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence

import torch

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

#: Correlation window radius used when a caller does not pick one.
DEFAULT_RADIUS = 4

#: Largest input accepted by :func:`grad_check` (batch, channels, height, width).
GRAD_CHECK_MAX_SHAPE = (1, 8, 6, 6)
GRAD_CHECK_MAX_ELEMENTS = 1 * 8 * 6 * 6


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def _check_4d(name: str, tensor: torch.Tensor) -> None:
    if tensor.dim() != 4:
        raise ValueError(
            f"'{name}' must be a 4-D [batch, channels, height, width] tensor, "
            f"got shape {tuple(tensor.shape)}."
        )
    b, c, h, w = tensor.shape
    if min(b, c, h, w) < 1:
        raise ValueError(f"'{name}' has an empty dimension: shape {tuple(tensor.shape)}.")


def _check_flow(flow: torch.Tensor, like: torch.Tensor) -> None:
    _check_4d("flow", flow)
    if flow.shape[1] != 2:
        raise ValueError(f"A flow field needs exactly 2 channels, got {flow.shape[1]}.")
    if flow.shape[0] != like.shape[0] or flow.shape[2:] != like.shape[2:]:
        raise ValueError(
            "Flow field and feature map are not spatially aligned:\n"
            f"  flow    : {tuple(flow.shape)}\n"
            f"  feature : {tuple(like.shape)}"
        )


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


def cost_volume(f1: torch.Tensor, f2: torch.Tensor, d: int = DEFAULT_RADIUS) -> torch.Tensor:
    """Correlate *f1* with a ``(2d+1)²`` window of *f2* around every pixel.

    ``C(p, o) = (1/N) · Σ_c f1(p, c) · f2(p + o, c)`` for every offset
    ``o = (ox, oy) ∈ [-d, d]²``, with ``N`` the channel count.  Samples of
    *f2* outside the map count as zero.

    Output channel ``k`` holds offset ``(ox, oy)`` with
    ``k = (oy + d) · (2d + 1) + (ox + d)``.

    Parameters
    ----------
    f1, f2:
        Feature maps of identical shape ``[B, N, H, W]``.
    d:
        Window radius in pixels, ``d >= 0``.

    Returns
    -------
    torch.Tensor
        ``[B, (2d+1)², H, W]`` correlation scores.

    Raises
    ------
    ValueError
        When the shapes differ or *d* is negative.
    """
    _check_4d("f1", f1)
    _check_4d("f2", f2)
    if f1.shape != f2.shape:
        raise ValueError(
            "cost_volume needs feature maps of identical shape:\n"
            f"  f1 : {tuple(f1.shape)}\n"
            f"  f2 : {tuple(f2.shape)}"
        )
    if d < 0:
        raise ValueError(f"Correlation radius must be >= 0, got {d}.")

    _, n, h, w = f1.shape
    padded = torch.nn.functional.pad(f2, (d, d, d, d))
    slices: List[torch.Tensor] = []
    for oy in range(2 * d + 1):
        for ox in range(2 * d + 1):
            window = padded[:, :, oy : oy + h, ox : ox + w]
            slices.append((f1 * window).sum(dim=1, keepdim=True))
    return torch.cat(slices, dim=1) / n


def offset_channel(ox: int, oy: int, d: int) -> int:
    """Return the cost-volume channel index holding offset ``(ox, oy)``."""
    if abs(ox) > d or abs(oy) > d:
        raise ValueError(f"Offset ({ox}, {oy}) lies outside the radius-{d} window.")
    return (oy + d) * (2 * d + 1) + (ox + d)


# ---------------------------------------------------------------------------
# Bilinear sampling / warping
# ---------------------------------------------------------------------------


def sample_bilinear(src: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample *src* at pixel coordinates ``(x, y)`` with zero fill.

    Each of the four bilinear corners contributes only when it lies inside
    *src*.  Integer coordinates reproduce the source value exactly.

    Parameters
    ----------
    src:
        ``[B, C, H, W]`` tensor.
    x, y:
        ``[B, h, w]`` pixel coordinates (column, row) into *src*.

    Returns
    -------
    torch.Tensor
        ``[B, C, h, w]`` sampled values.
    """
    b, c, h_src, w_src = src.shape
    out_shape = x.shape
    flat = src.reshape(b, c, h_src * w_src)

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    out = torch.zeros(b, c, *out_shape[1:], dtype=src.dtype, device=src.device)
    for xi, wx in ((x0, wx0), (x0 + 1.0, wx1)):
        for yi, wy in ((y0, wy0), (y0 + 1.0, wy1)):
            inside = (xi >= 0) & (xi <= w_src - 1) & (yi >= 0) & (yi <= h_src - 1)
            index = (
                yi.clamp(0, h_src - 1) * w_src + xi.clamp(0, w_src - 1)
            ).long().reshape(b, 1, -1).expand(b, c, -1)
            values = torch.gather(flat, 2, index).reshape(b, c, *out_shape[1:])
            weight = (wx * wy * inside.to(src.dtype)).unsqueeze(1)
            out = out + values * weight
    return out


def pixel_grid(
    batch: int, height: int, width: int, dtype: torch.dtype, device: torch.device
):
    """Return ``(xs, ys)``, each ``[batch, height, width]``, of integer pixel coordinates."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return xs.expand(batch, height, width), ys.expand(batch, height, width)


def warp_bilinear(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp *src* by *flow*: ``out(p) = src(p + flow(p))``.

    Samples falling outside *src* are filled with zero.  A zero flow returns
    *src* bit-exactly.

    Raises
    ------
    ValueError
        When *flow* is not a 2-channel field aligned with *src*.
    """
    _check_4d("src", src)
    _check_flow(flow, src)
    b, _, h, w = src.shape
    xs, ys = pixel_grid(b, h, w, src.dtype, src.device)
    return sample_bilinear(src, xs + flow[:, 0], ys + flow[:, 1])


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _upsample2x_along(x: torch.Tensor, dim: int) -> torch.Tensor:
    # Half-pixel centred linear interpolation with edge replication.
    size = x.shape[dim]
    first = x.narrow(dim, 0, 1)
    last = x.narrow(dim, size - 1, 1)
    prev = torch.cat([first, x.narrow(dim, 0, size - 1)], dim=dim)
    nxt = torch.cat([x.narrow(dim, 1, size - 1), last], dim=dim)
    even = x + 0.25 * (prev - x)
    odd = x + 0.25 * (nxt - x)
    stacked = torch.stack([even, odd], dim=dim + 1)
    shape = list(x.shape)
    shape[dim] = 2 * size
    return stacked.reshape(shape)


def upsample_bilinear2x(x: torch.Tensor) -> torch.Tensor:
    """Double the spatial size of *x* by bilinear interpolation.

    Uses the half-pixel convention (``align_corners=False``).  A constant
    input stays exactly constant.
    """
    _check_4d("x", x)
    return _upsample2x_along(_upsample2x_along(x, 2), 3)


def upsample_flow(flow: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Upsample a flow field ×2 and rescale its displacements to the new grid.

    Raises
    ------
    ValueError
        When *factor* is not 2 or *flow* is not a 2-channel field.
    """
    if factor != 2:
        raise ValueError(f"upsample_flow only supports factor 2, got {factor}.")
    _check_4d("flow", flow)
    if flow.shape[1] != 2:
        raise ValueError(f"A flow field needs exactly 2 channels, got {flow.shape[1]}.")
    return 2.0 * upsample_bilinear2x(flow)


def downsample_area(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Shrink *x* to ``height × width`` by area averaging."""
    if x.shape[-2:] == (height, width):
        return x
    return torch.nn.functional.interpolate(x, size=(height, width), mode="area")


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def normalize_01(f: torch.Tensor) -> torch.Tensor:
    """Min-max normalise each batch item of *f* to ``[0, 1]``.

    The minimum and maximum are taken over all channels and pixels of the
    item.  A constant item maps to all zeros.

    Raises
    ------
    ValueError
        When *f* contains NaN or infinite values.
    """
    _check_4d("f", f)
    if not torch.isfinite(f).all():
        raise ValueError("normalize_01 received NaN or infinite values.")
    lo = f.amin(dim=(1, 2, 3), keepdim=True)
    hi = f.amax(dim=(1, 2, 3), keepdim=True)
    span = hi - lo
    constant = span == 0
    safe_span = torch.where(constant, torch.ones_like(span), span)
    return torch.where(constant, torch.zeros_like(f), (f - lo) / safe_span)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def _max_relative_error(
    op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float
) -> float:
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = op(*leaves)
    generator = torch.Generator().manual_seed(1234)
    projection = (torch.rand(out.shape, generator=generator, dtype=out.dtype) + 0.5).to(out.device)

    def scalar(*args: torch.Tensor) -> torch.Tensor:
        return (op(*args) * projection).sum()

    analytic = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for k, leaf in enumerate(leaves):
            grad = analytic[k]
            if grad is None:
                grad = torch.zeros_like(leaf)
            base = [t.detach().clone() for t in leaves]
            flat = base[k].view(-1)
            for j in range(flat.numel()):
                original = flat[j].item()
                flat[j] = original + eps
                plus = scalar(*base).item()
                flat[j] = original - eps
                minus = scalar(*base).item()
                flat[j] = original
                numeric = (plus - minus) / (2.0 * eps)
                exact = grad.view(-1)[j].item()
                denom = max(abs(exact), abs(numeric), 1e-2)
                worst = max(worst, abs(exact - numeric) / denom)
    return worst


def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    resample: Optional[Callable[[int], Sequence[torch.Tensor]]] = None,
    max_retries: int = 3,
) -> float:
    """Compare autograd gradients of *op* against central finite differences.

    The output of *op* is projected onto fixed random weights to form a
    scalar; every element of every input is perturbed by ``±eps``.

    Parameters
    ----------
    op:
        Differentiable callable taking the tensors in *inputs*.
    inputs:
        Double-precision tensors no larger than ``1×8×6×6`` each.
    eps:
        Finite-difference step.
    tolerance:
        Error above which the inputs are suspected to sit on a
        non-differentiable point (e.g. a min-max tie or an integer sampling
        coordinate).
    resample:
        Optional ``attempt -> inputs`` factory.  When given and the error
        exceeds *tolerance*, fresh inputs are drawn up to *max_retries* times.
        An error still above *tolerance* at the end is logged at ERROR level.

    Returns
    -------
    float
        Maximum relative error over all input elements of the last attempt.

    Raises
    ------
    ValueError
        When an input is not double precision or exceeds the size limit.
    """
    def _validate(tensors: Sequence[torch.Tensor]) -> None:
        for t in tensors:
            if t.dtype != torch.float64:
                raise ValueError(f"grad_check needs float64 inputs, got {t.dtype}.")
            if t.numel() > GRAD_CHECK_MAX_ELEMENTS:
                raise ValueError(
                    f"grad_check input of shape {tuple(t.shape)} exceeds the "
                    f"{'x'.join(str(s) for s in GRAD_CHECK_MAX_SHAPE)} limit."
                )

    _validate(inputs)
    error = _max_relative_error(op, inputs, eps)
    attempt = 0
    while error > tolerance and resample is not None and attempt < max_retries:
        attempt += 1
        logger.warning(
            "grad_check error %.3g above %.1g; resampling inputs (attempt %d/%d)",
            error, tolerance, attempt, max_retries,
        )
        inputs = resample(attempt)
        _validate(inputs)
        error = _max_relative_error(op, inputs, eps)
    if error > tolerance:
        logger.error(
            "grad_check failed: max relative error %.3g above %.1g after %d resample(s)",
            error, tolerance, attempt,
        )
    return error
