"""Central finite-difference gradient checking for module parameters."""

import numpy as np
import torch


def central_difference_check(
    loss_fn,
    module: torch.nn.Module,
    n_params: int = 20,
    eps: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    seed: int = 0,
):
    """Compare analytic grads with central differences on random parameter
    entries. `loss_fn()` must return a scalar depending on `module` (which
    must already be in float64). Returns the max relative error seen."""
    for p in module.parameters():
        assert p.dtype == torch.float64, "gradient check requires float64"
    loss = loss_fn()
    module.zero_grad()
    loss.backward()

    params = [p for p in module.parameters() if p.grad is not None and p.numel() > 0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    while checked < n_params:
        p = params[int(rng.integers(len(params)))]
        flat = p.detach().reshape(-1)
        idx = int(rng.integers(flat.numel()))
        analytic = float(p.grad.reshape(-1)[idx])
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + eps
            up = float(loss_fn())
            flat[idx] = orig - eps
            dn = float(loss_fn())
            flat[idx] = orig
        numeric = (up - dn) / (2 * eps)
        if max(abs(analytic), abs(numeric)) < atol:
            # below finite-difference noise; counts as agreement
            checked += 1
            continue
        denom = max(abs(analytic), abs(numeric))
        rel = abs(analytic - numeric) / denom
        worst = max(worst, rel)
        assert rel <= rtol, (
            f"param entry {idx}: analytic {analytic:.3e} vs numeric {numeric:.3e}"
            f" (rel err {rel:.2e})"
        )
        checked += 1
    return worst
