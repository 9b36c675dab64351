"""Central finite-difference verification of the analytic gradients.

The loss callable must be deterministic: any stochastic draws inside it
have to be re-seeded per evaluation so that plus/minus perturbations see
identical noise.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import torch
import torch.nn as nn
from torch import Tensor

from .mapper import MapperNet
from .seq2seq import Seq2SeqModel

# relative error floor: differences below this absolute scale are
# dominated by finite-difference noise, not by gradient bugs
DEFAULT_SCALE_FLOOR = 1e-4


def parameter_groups(
    model: Seq2SeqModel, mapper: MapperNet
) -> dict[str, list[tuple[str, nn.Parameter]]]:
    groups = model.parameter_groups()
    groups["mapper"] = [
        ("mapper." + n, p) for n, p in mapper.named_parameters()
    ]
    return groups


def gradient_check(
    loss_fn: Callable[[], Tensor],
    groups: dict[str, list[tuple[str, nn.Parameter]]],
    h: float = 1e-5,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
    corrupt_group: Optional[str] = None,
    max_coords_per_param: Optional[int] = None,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference
    gradients, per parameter group.

    ``corrupt_group`` offsets that group's analytic gradient (fault
    injection for testing the harness itself). ``max_coords_per_param``
    subsamples coordinates deterministically when a faster, partial
    check is acceptable; None checks every coordinate.
    """
    params = [p for ps in groups.values() for _n, p in ps]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {id(p): p.grad.detach().clone() for p in params}
    if corrupt_group is not None:
        if corrupt_group not in groups:
            raise ValueError(f"unknown group '{corrupt_group}'")
        for _n, p in groups[corrupt_group]:
            analytic[id(p)] = analytic[id(p)] + 1.0

    result: dict[str, float] = {}
    with torch.no_grad():
        for gname, named in groups.items():
            worst = 0.0
            for _pname, p in named:
                flat = p.view(-1)
                n = flat.numel()
                if max_coords_per_param is not None and n > max_coords_per_param:
                    idxs: Iterable[int] = torch.linspace(
                        0, n - 1, max_coords_per_param
                    ).long().tolist()
                else:
                    idxs = range(n)
                an_flat = analytic[id(p)].view(-1)
                for i in idxs:
                    orig = float(flat[i])
                    flat[i] = orig + h
                    plus = float(loss_fn())
                    flat[i] = orig - h
                    minus = float(loss_fn())
                    flat[i] = orig
                    fd = (plus - minus) / (2 * h)
                    an = float(an_flat[i])
                    rel = abs(fd - an) / max(abs(fd), abs(an), scale_floor)
                    worst = max(worst, rel)
            result[gname] = worst
    return result


def format_report(errors: dict[str, float], tol: float = 1e-4) -> str:
    lines = []
    ok = True
    for name, err in sorted(errors.items()):
        status = "pass" if err < tol else "FAIL"
        ok = ok and err < tol
        lines.append(f"{name:12s} max_rel_err={err:.3e} {status}")
    lines.append("all groups pass" if ok else "gradient check FAILED")
    return "\n".join(lines)
