"""Ground truth for validating the cheap saliency scores.

The oracle actually removes channels, one coupling group at a time, and
measures the resulting loss change on a fixed minibatch. Removal is
simulated by zeroing the group's norm scales: with gamma at zero the
block's output collapses to its shift, exactly what structural removal
plus a bias correction would produce, so no surgery is needed per probe.
Also here: the first-order feature-map criterion (gradient times
activation, reduced per channel) and Spearman rank correlation with
average-rank tie handling.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autograd import Tape, Tensor, backward, loss as loss_op
from .errors import ConfigError, FormatError
from .netgraph import (
    ChannelRef,
    CouplingGroup,
    Network,
    build_coupling_groups,
    forward_full,
)


@dataclass
class OracleRecord:
    group: int
    members: tuple[ChannelRef, ...]
    delta_loss: float
    rank: int = -1

    @property
    def layer(self) -> int:
        return self.members[0].layer

    @property
    def channel(self) -> int:
        return self.members[0].channel


def _batch_loss(net: Network, batch_x: np.ndarray, batch_y, loss_kind: str) -> float:
    out = forward_full(net, Tensor(batch_x, dtype=net.dtype), "train",
                       update_stats=False)
    return loss_op(out, batch_y, loss_kind).item()


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("GFBS_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"GFBS_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def oracle_delta_loss(net: Network, batch_x: np.ndarray, batch_y,
                      loss_kind: str,
                      groups: list[CouplingGroup] | None = None) -> list[OracleRecord]:
    """|loss-with-group-zeroed - base loss| for every prunable group.

    The probe batch must be the same one the saliency capture used for
    the comparison to mean anything. The network is left bit-identical;
    each worker gets its own clone. GFBS_THREADS caps parallelism
    (default 1, serial).
    """
    if groups is None:
        groups = build_coupling_groups(net.spec)
    if not groups:
        return []
    snapshot = {name: t.data.copy() for name, t in net.named_tensors().items()}
    base = _batch_loss(net, batch_x, batch_y, loss_kind)

    def eval_group(work_net: Network, group: CouplingGroup) -> float:
        saved = []
        for ref in group.members:
            gamma = work_net.params[ref.layer].gamma
            saved.append((gamma, ref.channel, gamma.data[ref.channel].copy()))
            gamma.data[ref.channel] = 0.0
        try:
            probed = _batch_loss(work_net, batch_x, batch_y, loss_kind)
        finally:
            for gamma, ch, value in saved:
                gamma.data[ch] = value
        return abs(probed - base)

    workers = _worker_count(len(groups))
    deltas: list[float] = [0.0] * len(groups)
    if workers == 1:
        for k, g in enumerate(groups):
            deltas[k] = eval_group(net, g)
    else:
        # one private clone per worker; each chunk runs serially on its clone
        def eval_chunk(work_net: Network, indices: list[int]) -> list[float]:
            return [eval_group(work_net, groups[k]) for k in indices]

        chunks = [list(range(w, len(groups), workers)) for w in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(eval_chunk, net.clone(), chunk)
                       for chunk in chunks]
            for chunk, fut in zip(chunks, futures):
                for k, d in zip(chunk, fut.result()):
                    deltas[k] = d

    for name, t in net.named_tensors().items():
        if not np.array_equal(t.data, snapshot[name]):
            raise ConfigError(f"oracle probe failed to restore {name}")

    records = [OracleRecord(group=g.group_id, members=g.members, delta_loss=d)
               for g, d in zip(groups, deltas)]
    order = sorted(range(len(records)),
                   key=lambda i: (records[i].delta_loss, records[i].group))
    for rank, i in enumerate(order):
        records[i].rank = rank
    return records


def spot_check_zero_equivalence(net: Network, batch_x: np.ndarray, batch_y,
                                loss_kind: str, refs: list[ChannelRef]) -> float:
    """Max |loss(gamma_j=0) - loss(W_j=0, b_j=0)| over the given channels.

    Both edits silence the channel the same way: a zeroed filter yields an
    all-zero pre-norm map whose normalized form is zero, and a zeroed
    scale ignores the normalized form altogether; either way the block
    emits the shift. A large value here means the equivalence broke.
    """
    worst = 0.0
    for ref in refs:
        p = net.params[ref.layer]
        g_saved = p.gamma.data[ref.channel].copy()
        p.gamma.data[ref.channel] = 0.0
        via_gamma = _batch_loss(net, batch_x, batch_y, loss_kind)
        p.gamma.data[ref.channel] = g_saved

        w_saved = p.weight.data[ref.channel].copy()
        b_saved = p.bias.data[ref.channel].copy()
        p.weight.data[ref.channel] = 0.0
        p.bias.data[ref.channel] = 0.0
        via_filter = _batch_loss(net, batch_x, batch_y, loss_kind)
        p.weight.data[ref.channel] = w_saved
        p.bias.data[ref.channel] = b_saved

        worst = max(worst, abs(via_gamma - via_filter))
    return worst


def feature_taylor_saliency(net: Network, batch_x: np.ndarray, batch_y,
                            loss_kind: str) -> dict[ChannelRef, float]:
    """First-order criterion straight from feature maps:
    |sum over batch and space of (dL/dF * F)| per pre-norm channel."""
    trace: dict = {}
    tape = Tape()
    out = forward_full(net, Tensor(batch_x, dtype=net.dtype), "train",
                       tape=tape, trace=trace, update_stats=False)
    backward(tape, loss_op(out, batch_y, loss_kind, tape=tape))
    scores: dict[ChannelRef, float] = {}
    for i in net.bn_blocks():
        pre = trace[i]["pre_bn"]
        grad = pre.grad if pre.grad is not None else np.zeros_like(pre.data)
        per_channel = np.abs((grad * pre.data).sum(axis=(0, 2, 3)))
        for j, s in enumerate(per_channel):
            scores[ChannelRef(i, j)] = float(s)
    net.zero_grad()
    return scores


# ---------------------------------------------------------------------------
# rank statistics


def _average_ranks(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Rank correlation in [-1, 1]; ties get average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("spearman needs two equal-length 1-d sequences")
    if len(a) < 2:
        raise ConfigError("spearman needs at least 2 items")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        raise ConfigError("spearman undefined for constant input")
    return float((ra * rb).sum() / denom)


def bottom_fraction_overlap(scores_a, scores_b, fraction: float) -> tuple[int, int, float]:
    """How many of the lowest-``fraction`` items the two scorings share.

    Returns (overlap, k, random_expectation) where k is the bottom-set
    size and the expectation is k^2/n for an uninformed selection.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("overlap needs two equal-length 1-d sequences")
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must lie in (0, 1)")
    n = len(a)
    k = max(1, int(round(n * fraction)))
    bottom_a = set(np.argsort(a, kind="stable")[:k].tolist())
    bottom_b = set(np.argsort(b, kind="stable")[:k].tolist())
    return len(bottom_a & bottom_b), k, k * k / n


# ---------------------------------------------------------------------------
# CSV


ORACLE_HEADER = ["layer", "channel", "group", "delta_loss", "rank"]


def write_oracle_csv(records: list[OracleRecord], path) -> None:
    rows = []
    for r in records:
        for ref in r.members:
            rows.append((ref.layer, ref.channel, r.group, r.delta_loss, r.rank))
    rows.sort(key=lambda row: (row[0], row[1]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ORACLE_HEADER)
        for layer, channel, group, delta, rank in rows:
            writer.writerow([layer, channel, group, f"{delta:.9g}", rank])


def read_oracle_csv(path) -> list[OracleRecord]:
    by_group: dict[int, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ORACLE_HEADER:
            raise FormatError(f"{path}: unexpected oracle CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(ORACLE_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(ORACLE_HEADER)} fields")
            try:
                layer, channel, group = int(row[0]), int(row[1]), int(row[2])
                delta, rank = float(row[3]), int(row[4])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad field: {exc}") from exc
            slot = by_group.setdefault(group, {"members": [], "delta": delta, "rank": rank})
            slot["members"].append(ChannelRef(layer, channel))
    if not by_group:
        raise FormatError(f"{path}: no oracle rows")
    return [OracleRecord(group=gid, members=tuple(sorted(slot["members"])),
                         delta_loss=slot["delta"], rank=slot["rank"])
            for gid, slot in sorted(by_group.items())]
