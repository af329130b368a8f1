"""Channel scoring from one probe pass.

One train-mode forward/backward on a fixed minibatch captures, for every
norm-carrying channel, the triple (gamma, dL/dgamma, beta). Each layer's
three vectors are scaled to unit Euclidean norm so channels compete
globally on comparable footing, then combined into a scalar score:

    score = |grad_gamma_n * gamma_n| + lam * beta_n

with beta entering SIGNED: a channel whose shift is negative mostly dies
at the ReLU, so a negative beta makes the channel cheaper to remove. For
norm blocks without a trailing ReLU the beta term is dropped (the sign
argument needs the rectifier). Ablation criteria keep only one part of
the score; l1_filter ranks by normalized per-filter weight magnitude
instead and ignores the probe gradients entirely.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, Tensor, backward, loss as loss_op
from .errors import ConfigError, FormatError
from .netgraph import BN_KINDS, Network, build_coupling_groups, forward_full, group_lookup
from .netgraph import ChannelRef

CRITERIA = ("gfbs", "gamma_only", "beta_only", "l1_filter")

CSV_HEADER = ["layer", "channel", "gamma", "grad_gamma", "beta",
              "gamma_n", "grad_gamma_n", "beta_n", "score", "group", "rank"]


@dataclass
class PruneConfig:
    """Knobs shared by scoring and planning; field names match CLI flags."""

    lam: float = 0.05
    tau: float = 0.5
    criterion: str = "gfbs"
    batch_size: int = 64
    min_keep: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie strictly inside (0, 1)")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (train-mode norm)")
        if self.min_keep < 1:
            raise ConfigError("min_keep must be >= 1")


@dataclass
class SaliencyRecord:
    layer: int
    channel: int
    gamma: float
    grad_gamma: float
    beta: float
    weight_l1: float
    has_relu: bool
    group: int  # -1 when the channel sits on an unprunable stream
    gamma_n: float = 0.0
    grad_gamma_n: float = 0.0
    beta_n: float = 0.0
    weight_l1_n: float = 0.0
    score: float = 0.0
    rank: int = -1

    @property
    def ref(self) -> ChannelRef:
        return ChannelRef(self.layer, self.channel)


def capture(net: Network, batch_x: np.ndarray, batch_y: np.ndarray,
            loss_kind: str) -> list[SaliencyRecord]:
    """Probe pass: returns raw per-channel records, network untouched.

    Parameters are never updated and running statistics are left exactly
    as found (the probe normalizes with batch statistics and skips the
    running-average update). Gradients are consumed internally and
    cleared before returning.
    """
    bn_blocks = net.bn_blocks()
    if not bn_blocks:
        raise ConfigError("network has no norm-carrying blocks to score")
    if _looks_untrained(net, bn_blocks):
        warnings.warn("scoring a network with factory-default norm parameters; "
                      "saliencies will be uninformative", stacklevel=2)

    stats_before = {i: (net.params[i].running_mean.data.copy(),
                        net.params[i].running_var.data.copy())
                    for i in bn_blocks}
    net.zero_grad()
    tape = Tape()
    out = forward_full(net, Tensor(batch_x, dtype=net.dtype), "train",
                       tape=tape, update_stats=False)
    scalar = loss_op(out, batch_y, loss_kind, tape=tape)
    backward(tape, scalar)

    lookup = group_lookup(build_coupling_groups(net.spec))
    records: list[SaliencyRecord] = []
    for i in bn_blocks:
        p = net.params[i]
        g = p.gamma.data
        gg = p.gamma.grad if p.gamma.grad is not None else np.zeros_like(g)
        b = p.beta.data
        w_l1 = np.abs(p.weight.data).sum(axis=(1, 2, 3))
        has_relu = net.spec.blocks[i].kind == "conv_bn_relu"
        for j in range(p.out_channels):
            records.append(SaliencyRecord(
                layer=i, channel=j,
                gamma=float(g[j]), grad_gamma=float(gg[j]), beta=float(b[j]),
                weight_l1=float(w_l1[j]), has_relu=has_relu,
                group=lookup.get(ChannelRef(i, j), -1)))
    net.zero_grad()

    for i in bn_blocks:
        if not np.array_equal(net.params[i].running_mean.data, stats_before[i][0]) \
                or not np.array_equal(net.params[i].running_var.data, stats_before[i][1]):
            raise ConfigError("probe pass mutated running statistics")
    return records


def _looks_untrained(net: Network, bn_blocks: list[int]) -> bool:
    for i in bn_blocks:
        p = net.params[i]
        if not (np.all(p.gamma.data == 1.0) and np.all(p.beta.data == 0.0)):
            return False
    return True


def capture_mean(net: Network, batches, loss_kind: str) -> list[SaliencyRecord]:
    """Average raw captures over several minibatches. Off the beaten path:
    the standard recipe uses a single batch, but smoothing is available."""
    acc: list[SaliencyRecord] | None = None
    count = 0
    for batch_x, batch_y in batches:
        recs = capture(net, batch_x, batch_y, loss_kind)
        if acc is None:
            acc = recs
        else:
            for a, r in zip(acc, recs):
                a.gamma += r.gamma
                a.grad_gamma += r.grad_gamma
                a.beta += r.beta
                a.weight_l1 += r.weight_l1
        count += 1
    if acc is None:
        raise ConfigError("capture_mean needs at least one batch")
    for a in acc:
        a.gamma /= count
        a.grad_gamma /= count
        a.beta /= count
        a.weight_l1 /= count
    return acc


def normalize_layerwise(records: list[SaliencyRecord]) -> list[SaliencyRecord]:
    """Scale each layer's gamma / grad_gamma / beta / weight_l1 vectors to
    unit Euclidean norm, in place. All-zero vectors stay all-zero."""
    by_layer: dict[int, list[SaliencyRecord]] = {}
    for r in records:
        by_layer.setdefault(r.layer, []).append(r)
    for layer_records in by_layer.values():
        for raw, out in (("gamma", "gamma_n"), ("grad_gamma", "grad_gamma_n"),
                         ("beta", "beta_n"), ("weight_l1", "weight_l1_n")):
            vec = np.array([getattr(r, raw) for r in layer_records], dtype=np.float64)
            norm = float(np.linalg.norm(vec))
            scaled = vec / norm if norm > 0 else vec
            for r, v in zip(layer_records, scaled):
                setattr(r, out, float(v))
    return records


def score(records: list[SaliencyRecord], cfg: PruneConfig) -> list[SaliencyRecord]:
    """Fill score and global ascending rank (ties broken by layer, channel)."""
    if cfg.criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {cfg.criterion!r}")
    for r in records:
        taylor = abs(r.grad_gamma_n * r.gamma_n)
        if cfg.criterion == "gfbs":
            r.score = taylor + (cfg.lam * r.beta_n if r.has_relu else 0.0)
        elif cfg.criterion == "gamma_only":
            r.score = taylor
        elif cfg.criterion == "beta_only":
            r.score = r.beta_n
        else:  # l1_filter
            r.score = r.weight_l1_n
    order = sorted(range(len(records)),
                   key=lambda i: (records[i].score, records[i].layer, records[i].channel))
    for rank, i in enumerate(order):
        records[i].rank = rank
    return records


def saliency_records(net: Network, batch_x: np.ndarray, batch_y: np.ndarray,
                     loss_kind: str, cfg: PruneConfig) -> list[SaliencyRecord]:
    """capture -> normalize -> score in one call."""
    return score(normalize_layerwise(capture(net, batch_x, batch_y, loss_kind)), cfg)


# ---------------------------------------------------------------------------
# CSV round-trip


def write_saliency_csv(records: list[SaliencyRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in sorted(records, key=lambda r: (r.layer, r.channel)):
            writer.writerow([
                r.layer, r.channel,
                f"{r.gamma:.9g}", f"{r.grad_gamma:.9g}", f"{r.beta:.9g}",
                f"{r.gamma_n:.9g}", f"{r.grad_gamma_n:.9g}", f"{r.beta_n:.9g}",
                f"{r.score:.9g}", r.group, r.rank,
            ])


def read_saliency_csv(path) -> list[SaliencyRecord]:
    records: list[SaliencyRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise FormatError(f"{path}: unexpected saliency CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            try:
                records.append(SaliencyRecord(
                    layer=int(row[0]), channel=int(row[1]),
                    gamma=float(row[2]), grad_gamma=float(row[3]), beta=float(row[4]),
                    weight_l1=0.0, has_relu=True, group=int(row[9]),
                    gamma_n=float(row[5]), grad_gamma_n=float(row[6]),
                    beta_n=float(row[7]), score=float(row[8]), rank=int(row[10])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad field: {exc}") from exc
    if not records:
        raise FormatError(f"{path}: no saliency rows")
    return records
