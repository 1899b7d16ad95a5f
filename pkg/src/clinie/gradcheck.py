"""Central finite-difference gradients, the oracle for hand-written losses."""
import torch


def finite_difference_gradients(loss_fn, params, eps: float = 1e-4) -> dict:
    """Estimate d loss / d p for every entry of every named parameter.

    ``loss_fn`` takes no arguments and reads the parameters in place; it must
    be deterministic (dropout off).
    """
    out = {}
    with torch.no_grad():
        for name, p in dict(params).items():
            grad = torch.zeros_like(p)
            flat, gflat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            out[name] = grad
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Euclidean norm; 0 when both vanish below ``floor``."""
    a, b = a.detach().double().reshape(-1), b.detach().double().reshape(-1)
    scale = max(a.norm().item(), b.norm().item())
    if scale < floor:
        return 0.0
    return (a - b).norm().item() / scale


def check_gradients(loss_fn, params, eps: float = 1e-4) -> dict:
    """Relative error between autograd and finite differences, per parameter group."""
    params = dict(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(p))
                for (k, p), g in zip(params.items(), grads)}
    numeric = finite_difference_gradients(loss_fn, params, eps)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}
