"""Class-distance distributions (DCDs) and MMD-based matching losses.

Within/between-class pairwise distances are collected per part; student
distributions are pulled toward the (detached) teacher distributions with a
multi-bandwidth RBF maximum mean discrepancy.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel; bandwidths are used as-is ("fixed") or scaled by the pooled
    median pairwise difference per call ("median-heuristic-scaled")."""

    bandwidths: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    mode: str = "median-heuristic-scaled"

    def validate(self) -> None:
        if len(self.bandwidths) == 0:
            raise ValueError("need at least one bandwidth")
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError(f"bandwidths must be positive, got {self.bandwidths}")
        if self.mode not in ("fixed", "median-heuristic-scaled"):
            raise ValueError(f"unknown bandwidth mode {self.mode!r}")


@dataclass
class DistanceDistributionPair:
    """Empirical within/between-class distance samples for one part."""

    within: torch.Tensor
    between: torch.Tensor
    part: int
    domain: str = ""


def _pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    """Distances for all unordered pairs of rows of x, subgradient 0 at
    coinciding pairs (plain sqrt would give NaN there)."""
    B = x.shape[0]
    iu = torch.triu_indices(B, B, offset=1)
    diff = x[iu[0]] - x[iu[1]]
    sq = diff.pow(2).sum(dim=-1)
    safe = torch.sqrt(sq.clamp_min(torch.finfo(sq.dtype).tiny))
    return torch.where(sq > 0, safe, sq * 0.0)


def pairwise_part_distances(parts: torch.Tensor, labels: torch.Tensor,
                            domain: str = "") -> list[DistanceDistributionPair]:
    """Split all unordered pair distances of a (B, p, C) batch by label equality.

    Per part, |within| + |between| = B(B-1)/2. An empty `within` (no repeated
    label in the batch) is returned as-is; loss code treats that term as 0.
    """
    if parts.dim() != 3:
        raise ValueError(f"expected (B, p, C) parts, got {tuple(parts.shape)}")
    B, p, _ = parts.shape
    if B < 2:
        raise ValueError("need a batch of at least 2 samples")
    labels = torch.as_tensor(labels)
    if labels.shape != (B,):
        raise ValueError(f"labels must have shape ({B},), got {tuple(labels.shape)}")
    iu = torch.triu_indices(B, B, offset=1)
    same = labels[iu[0]] == labels[iu[1]]
    out = []
    for i in range(p):
        d = _pairwise_euclidean(parts[:, i, :])
        out.append(DistanceDistributionPair(d[same], d[~same], part=i, domain=domain))
    return out


def median_bandwidth(samples_a: torch.Tensor, samples_b: torch.Tensor) -> float:
    """Median absolute pairwise difference over the pooled multiset (1.0 if zero)."""
    pooled = torch.cat([torch.as_tensor(samples_a).reshape(-1),
                        torch.as_tensor(samples_b).reshape(-1)]).detach()
    n = pooled.numel()
    if n < 2:
        raise ValueError("need at least 2 pooled samples")
    iu = torch.triu_indices(n, n, offset=1)
    diffs = (pooled[iu[0]] - pooled[iu[1]]).abs()
    m = diffs.numel()
    if m % 2 == 1:
        med = torch.kthvalue(diffs, m // 2 + 1).values.item()
    else:
        med = 0.5 * (torch.kthvalue(diffs, m // 2).values
                     + torch.kthvalue(diffs, m // 2 + 1).values).item()
    return med if med > 0 else 1.0


def _kernel_mean(a: torch.Tensor, b: torch.Tensor, bandwidths: list[float]) -> torch.Tensor:
    sq = (a[:, None] - b[None, :]).pow(2)
    k = sum(torch.exp(-sq / (2.0 * bw * bw)) for bw in bandwidths)
    # summing both contiguous orderings keeps mmd(a,b) == mmd(b,a) bitwise
    # (a reduction over a transposed view would fall back to memory order)
    total = 0.5 * (k.reshape(-1).sum() + k.t().contiguous().reshape(-1).sum())
    return total / k.numel()


def mmd(samples_a: torch.Tensor, samples_b: torch.Tensor,
        kernel: KernelConfig) -> torch.Tensor:
    """Biased (V-statistic) squared MMD between two 1-D sample sets.

    Sums an RBF kernel over the configured bandwidth list; diagonal terms are
    included, and the result is clamped at 0 against negative rounding. The
    median-heuristic bandwidth is treated as a constant (no gradient).
    """
    kernel.validate()
    a = torch.as_tensor(samples_a).reshape(-1)
    b = torch.as_tensor(samples_b).reshape(-1)
    if a.numel() == 0 or b.numel() == 0:
        raise ValueError("mmd requires non-empty sample lists")
    if kernel.mode == "median-heuristic-scaled":
        sigma = median_bandwidth(a, b)
        bws = [sigma * s for s in kernel.bandwidths]
    else:
        bws = list(kernel.bandwidths)
    val = _kernel_mean(a, a, bws) + _kernel_mean(b, b, bws) - 2.0 * _kernel_mean(a, b, bws)
    return val.clamp_min(0.0)


# Coordinate cap for the global feature-matching term: a full desk-scale batch
# gives B*C = 4096 scalars per part, whose kernel matrices dwarf the rest of a
# training step. An evenly strided subsample keeps the term deterministic.
GLOBAL_SAMPLE_CAP = 512


def _strided_cap(flat: torch.Tensor, cap: int = GLOBAL_SAMPLE_CAP) -> torch.Tensor:
    n = flat.numel()
    if n <= cap:
        return flat
    idx = torch.linspace(0, n - 1, cap, dtype=torch.long, device=flat.device)
    return flat[idx]


def dcd_loss(teacher_parts: torch.Tensor, teacher_labels: torch.Tensor,
             student_attended: torch.Tensor, student_labels: torch.Tensor,
             kernel: KernelConfig, weights,
             student_raw_parts: torch.Tensor | None = None,
             use_global: bool = True) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Distribution-matching loss between teacher and student DCDs.

    Teacher features enter as constants (detached), so only the student branch
    receives gradient. Per part: MMD between within-class distance sets and
    between between-class sets, averaged over parts. The global term matches
    the raw (un-attended) part-feature coordinates of both branches; it needs
    `student_raw_parts` and can be disabled when both domains coincide.

    Returns (l_d, {"l_d_wc","l_d_bc","l_global"}).
    """
    tp = teacher_parts.detach()
    t_pairs = pairwise_part_distances(tp, teacher_labels, domain="holistic")
    s_pairs = pairwise_part_distances(student_attended, student_labels, domain="occluded")
    p = len(t_pairs)
    zero = student_attended.sum() * 0.0

    wc_terms, bc_terms = [], []
    for t, s in zip(t_pairs, s_pairs):
        if t.within.numel() == 0 or s.within.numel() == 0:
            wc_terms.append(zero)
        else:
            wc_terms.append(mmd(t.within, s.within, kernel))
        if t.between.numel() == 0 or s.between.numel() == 0:
            bc_terms.append(zero)
        else:
            bc_terms.append(mmd(t.between, s.between, kernel))
    l_wc = sum(wc_terms) / p
    l_bc = sum(bc_terms) / p

    if use_global and student_raw_parts is not None and weights.lambda3 > 0:
        g_terms = [mmd(_strided_cap(tp[:, i, :].reshape(-1)),
                       _strided_cap(student_raw_parts[:, i, :].reshape(-1)),
                       kernel) for i in range(p)]
        l_global = sum(g_terms) / p
    else:
        l_global = zero

    l_d = weights.lambda1 * l_wc + weights.lambda2 * l_bc + weights.lambda3 * l_global
    return l_d, {"l_d_wc": l_wc, "l_d_bc": l_bc, "l_global": l_global}
