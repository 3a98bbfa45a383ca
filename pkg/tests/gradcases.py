"""Random small configurations for gradient checks of the separation math."""

import torch

from avsep.nets import grad_check
from avsep.separation import attend, fuse, joint_loss


def _config(seed):
    g = torch.Generator().manual_seed(seed)
    k = int(torch.randint(2, 6, (1,), generator=g))
    h, w = (int(v) for v in torch.randint(2, 5, (2,), generator=g))
    return g, k, h, w


def fuse_error(seed):
    g, k, h, w = _config(seed)
    e = torch.rand(k, generator=g, dtype=torch.float64)
    s = torch.randn(k, h, w, generator=g, dtype=torch.float64)
    return grad_check(lambda e, s: fuse(e, s).soft, [e, s], seed=seed)


def attend_error(seed):
    g, k, h, w = _config(seed)
    e = torch.rand(k, generator=g, dtype=torch.float64)
    feats = torch.randn(k, h, w, generator=g, dtype=torch.float64)
    return grad_check(lambda e, f: attend(e, f).p_hat, [e, feats], seed=seed)


def joint_loss_error(seed):
    """Gradient of the full objective through fusion and both attention pairings."""
    g, k, h, w = _config(seed)
    e1, e2 = torch.rand(2, k, generator=g, dtype=torch.float64)
    s = torch.randn(k, 2 * h, 2 * w, generator=g, dtype=torch.float64)
    a1, a2 = torch.randn(2, k, h, w, generator=g, dtype=torch.float64)
    gt = (torch.rand(2 * h, 2 * w, generator=g) < 0.5).double()

    def objective(e1, e2, s, a1, a2):
        pairs = [(attend(e1, a1), 1), (attend(e1, a2), 0), (attend(e2, a2), 1), (attend(e2, a1), 0)]
        return joint_loss(fuse(e1, s).soft, gt, pairs).total

    return grad_check(objective, [e1, e2, s, a1, a2], seed=seed)
