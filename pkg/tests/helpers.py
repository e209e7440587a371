"""Independent oracles shared by several test modules."""
import numpy as np
import torch

FD_STEP = 1e-3


def finite_difference_error(fn, *inputs, h=FD_STEP):
    """Worst relative error between autograd and central differences over ``inputs``.

    ``fn`` maps float64 tensors to a scalar tensor. The error for each input
    is ``|g_a - g_n| / max(|g_a|, |g_n|)`` in the Euclidean norm.
    """
    inputs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for k, x in enumerate(inputs):
            numeric = torch.zeros_like(x)
            flat, nflat = x.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            a = analytic[k] if analytic[k] is not None else torch.zeros_like(x)
            scale = max(a.norm().item(), numeric.norm().item(), 1e-12)
            worst = max(worst, (a - numeric).norm().item() / scale)
    return worst


def stencil_in_one_region(module, fn, x, h=FD_STEP):
    """True when every ``x +- h e_i`` evaluation of ``fn`` sees the same (Leaky)ReLU sign pattern as ``x``.

    Central differences are only a valid oracle for piecewise-linear networks
    inside a single linear region.
    """
    patterns = []
    hooks = [m.register_forward_pre_hook(lambda mod, inp: patterns.append((inp[0] > 0).clone()))
             for m in module.modules() if isinstance(m, (torch.nn.LeakyReLU, torch.nn.ReLU))]
    try:
        with torch.no_grad():
            fn(x)
            base, patterns[:] = list(patterns), []
            flat = x.detach().clone().reshape(-1)
            for i in range(flat.numel()):
                for sign in (1, -1):
                    probe = flat.clone()
                    probe[i] += sign * h
                    fn(probe.reshape(x.shape))
                    if any(not torch.equal(a, b) for a, b in zip(base, patterns)):
                        return False
                    patterns[:] = []
    finally:
        for hk in hooks:
            hk.remove()
    return True


def windowed_mean(frames, before, after):
    """Plain-loop moving average over ``[t - before, t + after]``, truncated at the ends."""
    n = len(frames)
    out = []
    for t in range(n):
        acc, count = np.zeros_like(np.asarray(frames[0], dtype=np.float64)), 0
        for s in range(t - before, t + after + 1):
            if 0 <= s < n:
                acc = acc + np.asarray(frames[s], dtype=np.float64)
                count += 1
        out.append(acc / count)
    return out


def gaussian_frechet_1d(mu1, var1, mu2, var2):
    return (mu1 - mu2) ** 2 + var1 + var2 - 2 * np.sqrt(var1 * var2)


ACCEPTANCE_RESULTS = []


def record(criterion, passed, detail):
    """Log an acceptance outcome for the terminal summary and return ``passed``."""
    ACCEPTANCE_RESULTS.append((criterion, bool(passed), detail))
    return passed
