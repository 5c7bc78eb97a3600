"""Shared oracles for the test suite."""

import torch


def central_difference_check(loss_fn, tensors, n_coords: int = 24, step: float = 1e-5, seed: int = 0) -> float:
    """Norm-wise relative error between autograd and central differences.

    A random sample of ``n_coords`` coordinates is drawn across ``tensors``
    (float64 leaves). Returns ||g_auto - g_fd|| / ||g_fd||.
    """
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss_fn().backward()
    auto_grads = [t.grad.detach().clone() for t in tensors]

    gen = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([t.numel() for t in tensors], dtype=torch.float64)
    picks = torch.multinomial(sizes, n_coords, replacement=True, generator=gen)
    auto, numeric = [], []
    with torch.no_grad():
        for ti in picks.tolist():
            t = tensors[ti]
            flat = t.view(-1)
            j = int(torch.randint(t.numel(), (1,), generator=gen))
            orig = flat[j].item()
            flat[j] = orig + step
            up = loss_fn().item()
            flat[j] = orig - step
            down = loss_fn().item()
            flat[j] = orig
            numeric.append((up - down) / (2 * step))
            auto.append(auto_grads[ti].view(-1)[j].item())
    a = torch.tensor(auto, dtype=torch.float64)
    n = torch.tensor(numeric, dtype=torch.float64)
    return float((a - n).norm() / n.norm().clamp_min(1e-300))
