import numpy as np
import pytest
import torch

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda text: int(text.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        return ok

    return record


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def sample_parameter_coords(params, count, generator):
    """Random (parameter, flat index) pairs drawn uniformly over all scalar entries."""
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    picks = torch.multinomial(sizes / sizes.sum(), count, replacement=True, generator=generator)
    coords = []
    for pi in picks.tolist():
        coords.append((params[pi], int(torch.randint(params[pi].numel(), (1,), generator=generator))))
    return coords


def finite_difference_errors(loss_fn, params, count=20, h=1e-6, seed=0):
    """Relative errors between autograd and central differences at sampled coordinates."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {id(p): p.grad.detach().clone() for p in params}
    errors = []
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p, i in sample_parameter_coords(params, count, gen):
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            errors.append(relative_error(analytic[id(p)].view(-1)[i].item(), (up - down) / (2 * h)))
    return errors


@pytest.fixture
def fd_errors():
    return finite_difference_errors


def small_config(*overrides, dtype="float64", iterations=0):
    """16x16 patches, f=4, n_z=8; every stage runs ``iterations`` steps by default."""
    from adacode.config import apply_overrides, preset

    base = [
        f"network.dtype={dtype}",
        "data.patch_size=16",
        "data.patches_per_class=6",
        "network.predictor_dim=8",
        "network.predictor_depth=2",
        "stage1.batch_size=4",
        "stage2.batch_size=4",
        "stage3.batch_size=4",
    ] + [f"stage{n}.iterations={iterations}" for n in (1, 2, 3)]
    return apply_overrides(preset("tiny"), base + list(overrides))


def toy_groups(config, seed=0):
    from adacode.data import ToyDataSpec, synthesize_toy_dataset

    d = config.data
    data = synthesize_toy_dataset(ToyDataSpec(d.num_classes, d.patches_per_class, d.patch_size), seed=seed)
    return {k: torch.stack([lp.patch for lp in v]) for k, v in data.items()}


def reference_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Direct per-window SSIM on BT.601 luma with an 11x11, sigma 1.5 Gaussian window."""
    weights = np.array([0.299, 0.587, 0.114])
    x = np.tensordot(weights, a, axes=1)
    y = np.tensordot(weights, b, axes=1)
    r = np.arange(11) - 5.0
    g = np.exp(-(r**2) / (2 * 1.5**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cov = (w * (px - mx) * (py - my)).sum()
            values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))
