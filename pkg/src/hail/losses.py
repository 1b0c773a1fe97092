"""Training objectives for both phases.

Phase 1 minimizes an equal-weight L1 + SSIM reconstruction loss. Phase 2
combines a content term (deep features of the prediction vs. the AdaIN
features it was decoded from), a style term (per-channel mean/std of every
encoder level, prediction vs. target) and a consistency term (the same
L1 + SSIM loss between prediction and input).
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, box_sum3d, channel_stats, mean, square, tabs
from .autodiff.tensor import as_tensor

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    lambda_style: float = 100.0
    lambda_content: float = 150.0
    lambda_consistency: float = 200.0

    def __post_init__(self):
        if min(self.lambda_style, self.lambda_content, self.lambda_consistency) < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l1_loss")
    return mean(tabs(a - b))


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> Tensor:
    """Mean 3D SSIM over all fully-contained uniform windows."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "ssim")
    if a.ndim != 5:
        raise ValueError(f"ssim expects (B, C, D, H, W) tensors, got {a.shape}")
    if min(a.shape[2:]) < window:
        raise ValueError(f"spatial size {a.shape[2:]} is smaller than the {window}^3 SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    n = float(window**3)

    def local_mean(t):
        return box_sum3d(t, window) / n

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(square(a)) - square(mu_a)
    var_b = local_mean(square(b)) - square(mu_b)
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (square(mu_a) + square(mu_b) + c1) * (var_a + var_b + c2)
    return mean(num / den)


def ssim_loss(a, b, window: int = SSIM_WINDOW) -> Tensor:
    return 1.0 - ssim(a, b, window)


def l1_ssim_loss(pred, reference) -> Tensor:
    """0.5 * L1 + 0.5 * (1 - SSIM)."""
    return 0.5 * l1_loss(pred, reference) + 0.5 * ssim_loss(pred, reference)


def reconstruction_loss(pred, original) -> Tensor:
    return l1_ssim_loss(pred, original)


def consistency_loss(pred, input) -> Tensor:
    """Identity pull towards the input, same definition as the reconstruction loss."""
    return l1_ssim_loss(pred, input)


def content_loss(pred_features, adain_output) -> Tensor:
    """MSE between the deepest features of the prediction and the AdaIN features."""
    deep = pred_features[-1]
    adain_output = as_tensor(adain_output)
    _same_shape(deep, adain_output, "content_loss")
    return mean(square(deep - adain_output))


def style_loss(pred_features, target_features) -> Tensor:
    """Sum over levels of squared L2 distances between channel means and stds.

    Channel distances are summed, then averaged over the batch.
    """
    if len(pred_features) != len(target_features):
        raise ValueError("style_loss: pyramids have different depths")
    total = None
    for k, (fp, ft) in enumerate(zip(pred_features, target_features)):
        _same_shape(fp, ft, f"style_loss level {k + 1}")
        mu_p, sd_p = channel_stats(fp)
        mu_t, sd_t = channel_stats(ft)
        term = mean((square(mu_p - mu_t) + square(sd_p - sd_t)).sum(axis=1))
        total = term if total is None else total + term
    return total


def phase2_components(pred, input, pred_features, target_features, adain_output) -> dict[str, Tensor]:
    return {
        "content": content_loss(pred_features, adain_output),
        "style": style_loss(pred_features, target_features),
        "consistency": consistency_loss(pred, input),
    }


def weighted_total(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    return (
        weights.lambda_content * components["content"]
        + weights.lambda_style * components["style"]
        + weights.lambda_consistency * components["consistency"]
    )


def phase2_total(pred, input, pred_features, target_features, adain_output, weights: LossWeights) -> Tensor:
    return weighted_total(
        phase2_components(pred, input, pred_features, target_features, adain_output), weights
    )
