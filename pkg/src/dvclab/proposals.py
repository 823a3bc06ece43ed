"""Temporal event proposals: anchor priors, conv heads, training, selection.

Anchor priors come from 1-D k-means over ground-truth event lengths.  Per
modality, a stack of three 1-D convolutions (k1 arbitrary, k2 = k3 = 1)
over the bi-modal encoder output predicts, for every grid cell and anchor,
a center offset, a length coefficient and a confidence logit.  Proposals
from the two modalities are merged half-and-half by confidence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Module, Parameter, Tensor
from .dataset import load_feature_matrix, save_feature_matrix
from .metrics import tiou

MODALITIES = ("visual", "semantic")


@dataclass
class AnchorSet:
    """Prior event lengths in seconds, sorted ascending."""

    priors: np.ndarray

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.priors.ndim != 1 or len(self.priors) < 1:
            raise ValueError("priors must be a non-empty vector")
        if (self.priors <= 0).any():
            raise ValueError("all priors must be positive")
        if (np.diff(self.priors) < 0).any():
            raise ValueError("priors must be sorted ascending")

    def __len__(self):
        return len(self.priors)


@dataclass
class Proposal:
    video_id: str
    center_s: float
    length_s: float
    confidence: float
    modality: str

    @property
    def start_s(self) -> float:
        return self.center_s - self.length_s / 2.0

    @property
    def end_s(self) -> float:
        return self.center_s + self.length_s / 2.0


@dataclass
class ProposalSet:
    video_id: str
    proposals: list
    shortfall: bool = False


def _lloyd_1d(values: np.ndarray, k: int, seed: int, max_iters: int = 200) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # k-means++ seeding
    centers = [values[int(rng.integers(len(values)))]]
    d2 = (values - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            centers.append(values[int(rng.choice(len(values), p=d2 / total))])
        else:
            centers.append(centers[-1])
        d2 = np.minimum(d2, (values - centers[-1]) ** 2)
    centers = np.array(centers, dtype=np.float64)

    labels = None
    for _ in range(max_iters):
        dist = (values[:, None] - centers[None, :]) ** 2
        new_labels = np.argmin(dist, axis=1)
        for c in range(k):
            sel = new_labels == c
            if sel.any():
                centers[c] = values[sel].mean()
            else:
                far = int(np.argmax(dist[np.arange(len(values)), new_labels]))
                centers[c] = values[far]
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return centers


def fit_anchors(ann, num_anchors: int, seed: int = 0) -> AnchorSet:
    """Cluster ground-truth event lengths with full-batch Lloyd k-means."""
    lengths = np.array([end - start
                        for vid in ann
                        for start, end in ann[vid].events], dtype=np.float64)
    if len(lengths) < num_anchors:
        raise ValueError(f"need at least {num_anchors} events, found {len(lengths)}")
    centers = _lloyd_1d(lengths, num_anchors, seed)
    return AnchorSet(np.sort(centers))


@dataclass
class ProposalHeadConfig:
    num_anchors: int = 10
    kernel_sizes: tuple = (5, 9, 13)
    hidden_channels: int = 32
    neg_weight: float = 0.1

    def __post_init__(self):
        if self.num_anchors < 1 or self.hidden_channels < 1:
            raise ValueError("num_anchors and hidden_channels must be >= 1")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be positive odd integers")
        if not 0 <= self.neg_weight:
            raise ValueError("neg_weight must be non-negative")


class Conv1dSame(Module):
    """1-D convolution over rows with same-length zero padding (odd kernel)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.kernel = kernel
        self.in_ch = in_ch
        self.w = Parameter(ad.xavier_uniform(rng, kernel * in_ch, out_ch))
        self.b = Parameter(np.zeros(out_ch))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        n = x.shape[0]
        pad = (self.kernel - 1) // 2
        if pad:
            zeros = Tensor(np.zeros((pad, self.in_ch)))
            x = ad.concat([zeros, x, zeros], axis=0)
        cols = ad.concat([ad.slice_rows(x, i, i + n) for i in range(self.kernel)], axis=1)
        return ad.add(ad.matmul(cols, self.w), self.b)


class _ConvStack(Module):
    def __init__(self, d_model: int, hidden: int, out_ch: int, kernel: int, rng):
        self.c1 = Conv1dSame(d_model, hidden, kernel, rng)
        self.c2 = Conv1dSame(hidden, hidden, 1, rng)
        self.c3 = Conv1dSame(hidden, out_ch, 1, rng)

    def __call__(self, x) -> Tensor:
        return self.c3(ad.relu(self.c2(ad.relu(self.c1(x)))))


def _anchor_groups(num_anchors: int, kernel_sizes) -> list:
    """Contiguous partitions of sorted anchor indices, one per kernel size."""
    n_groups = min(len(kernel_sizes), num_anchors)
    return [list(g) for g in np.array_split(np.arange(num_anchors), n_groups)]


class ProposalHead(Module):
    """Per-modality head: one conv stack per anchor group.

    Output at grid cell t, anchor a: columns (3a, 3a+1, 3a+2) hold the
    center-offset logit, length logit and confidence logit.
    """

    def __init__(self, d_model: int, cfg: ProposalHeadConfig, rng):
        self.groups = _anchor_groups(cfg.num_anchors, cfg.kernel_sizes)
        self.stacks = [
            _ConvStack(d_model, cfg.hidden_channels, 3 * len(group), k, rng)
            for group, k in zip(self.groups, cfg.kernel_sizes)
        ]

    def __call__(self, stream) -> Tensor:
        outs = [stack(stream) for stack in self.stacks]
        return ad.concat(outs, axis=1) if len(outs) > 1 else outs[0]


def head_forward(head: ProposalHead, stream, anchors: AnchorSet,
                 clip_duration_s: float):
    """Raw prediction grid: (center_s, length_s, confidence) arrays, (L, A).

    center_s = (t + 0.5 + tanh(offset)/2) * clip_duration_s, length_s =
    prior * exp(length logit), confidence = sigmoid(conf logit); intervals
    are clamped to [0, L * clip_duration_s].
    """
    stream = np.asarray(stream.data if isinstance(stream, Tensor) else stream, dtype=np.float64)
    if stream.ndim != 2 or stream.shape[0] < 1:
        raise ValueError("encoded stream must be a non-empty 2-D matrix")
    n = stream.shape[0]
    duration = n * clip_duration_s
    with ad.no_grad():
        raw = head(Tensor(stream)).data.reshape(n, len(anchors), 3)
    cells = np.arange(n, dtype=np.float64)[:, None]
    centers = (cells + 0.5 + np.tanh(raw[:, :, 0]) / 2.0) * clip_duration_s
    lengths = anchors.priors[None, :] * np.exp(raw[:, :, 1])
    confs = 1.0 / (1.0 + np.exp(-raw[:, :, 2]))
    starts = np.clip(centers - lengths / 2.0, 0.0, duration)
    ends = np.clip(centers + lengths / 2.0, 0.0, duration)
    return (starts + ends) / 2.0, ends - starts, confs


@dataclass
class ProposalExample:
    """One training video: both encoded streams plus its ground truth."""

    video_id: str
    vis_stream: np.ndarray
    sem_stream: np.ndarray
    events: list
    clip_duration_s: float


def match_targets(events, num_cells: int, clip_duration_s: float, anchors: AnchorSet) -> dict:
    """(cell, anchor) -> (offset target, log-length target) for each GT event.

    An event claims the cell containing its center and the anchor whose
    prior-length interval at that cell midpoint has the highest IoU with
    the event.  First event wins a contested slot.
    """
    out = {}
    for start, end in events:
        center = (start + end) / 2.0
        cell = min(int(center / clip_duration_s), num_cells - 1)
        mid = (cell + 0.5) * clip_duration_s
        best_a, best_iou = 0, -1.0
        for a, prior in enumerate(anchors.priors):
            iou = tiou((mid - prior / 2.0, mid + prior / 2.0), (start, end))
            if iou > best_iou:
                best_a, best_iou = a, iou
        u = center / clip_duration_s - (cell + 0.5)
        out.setdefault((cell, best_a), (u, np.log((end - start) / anchors.priors[best_a])))
    return out


def _selection_matrices(num_anchors: int):
    sel = np.zeros((3, 3 * num_anchors, num_anchors))
    for a in range(num_anchors):
        for ch in range(3):
            sel[ch, 3 * a + ch, a] = 1.0
    return sel


def proposal_loss(raw: Tensor, targets: dict, num_anchors: int, neg_weight: float) -> Tensor:
    """MSE on matched (offset, log-length) plus weighted confidence BCE.

    Everything is normalized by the number of matched slots; unmatched
    slots contribute only the down-weighted negative-class cross-entropy.
    """
    if not targets:
        raise ValueError("no ground-truth events matched to the grid")
    n = raw.shape[0]
    sel = _selection_matrices(num_anchors)
    off = ad.matmul(raw, Tensor(sel[0]))
    lng = ad.matmul(raw, Tensor(sel[1]))
    cnf = ad.matmul(raw, Tensor(sel[2]))

    pos_mask = np.zeros((n, num_anchors))
    u_tgt = np.zeros((n, num_anchors))
    len_tgt = np.zeros((n, num_anchors))
    for (cell, a), (u, loglen) in targets.items():
        pos_mask[cell, a] = 1.0
        u_tgt[cell, a] = u
        len_tgt[cell, a] = loglen
    n_pos = pos_mask.sum()

    u_pred = ad.mul(ad.tanh(off), 0.5)
    d_off = ad.mul(ad.add(u_pred, Tensor(-u_tgt)), Tensor(pos_mask))
    d_len = ad.mul(ad.add(lng, Tensor(-len_tgt)), Tensor(pos_mask))
    reg = ad.add(ad.tsum(ad.mul(d_off, d_off)), ad.tsum(ad.mul(d_len, d_len)))

    weights = np.where(pos_mask > 0, 1.0, neg_weight)
    conf = ad.bce_with_logits(cnf, pos_mask, weights)
    return ad.mul(ad.add(reg, conf), 1.0 / n_pos)


@dataclass
class ProposalTrainHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    seed: int = 0


@dataclass
class ProposalModule:
    """Trained per-modality heads plus their anchors and configuration."""

    heads: dict
    anchors: AnchorSet
    cfg: ProposalHeadConfig
    d_model: int


def _encode_frozen(encoder, vis, sem):
    encoder.eval()
    with ad.no_grad():
        v, s = encoder.encode(vis, sem)
    return v.data.copy(), s.data.copy()


def train_proposal_module(encoder, dataset, anchors: AnchorSet,
                          cfg: ProposalHeadConfig, hyper: ProposalTrainHyper,
                          d_model: int | None = None) -> ProposalModule:
    """Train both modality heads on frozen bi-modal encoder outputs.

    ``dataset`` items are :class:`ProposalExample`; the encoder is only
    used to produce the streams, its parameters receive no updates.
    """
    dataset = list(dataset)
    if not any(ex.events for ex in dataset):
        raise ValueError("dataset has no ground-truth events")

    encoded = []
    for ex in dataset:
        v, s = _encode_frozen(encoder, ex.vis_stream, ex.sem_stream)
        encoded.append((v, s))
    dm = d_model if d_model is not None else encoded[0][0].shape[1]

    rng = np.random.default_rng(hyper.seed)
    heads = {
        "visual": ProposalHead(dm, cfg, rng),
        "semantic": ProposalHead(dm, cfg, rng),
    }
    params = heads["visual"].parameters() + heads["semantic"].parameters()
    optimizer = Adam(params, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)

    targets = [
        match_targets(ex.events, encoded[i][0].shape[0], ex.clip_duration_s, anchors)
        for i, ex in enumerate(dataset)
    ]

    for _ in range(hyper.epochs):
        order = rng.permutation(len(dataset))
        for idx in order:
            if not targets[idx]:
                continue
            v, s = encoded[idx]
            optimizer.zero_grad()
            loss_v = proposal_loss(heads["visual"](Tensor(v)), targets[idx],
                                   cfg.num_anchors, cfg.neg_weight)
            loss_s = proposal_loss(heads["semantic"](Tensor(s)), targets[idx],
                                   cfg.num_anchors, cfg.neg_weight)
            ad.add(loss_v, loss_s).backward()
            optimizer.step()
    return ProposalModule(heads=heads, anchors=anchors, cfg=cfg, d_model=dm)


def generate_proposals(module: ProposalModule, streams, n_proposals: int,
                       clip_duration_s: float, video_id: str = "") -> ProposalSet:
    """Top-N proposals, half per modality (visual gets the odd slot).

    Each modality contributes its own highest-confidence grid predictions;
    the merged list is sorted by confidence descending with ties broken by
    earlier center, then modality tag.  If the grids hold fewer than N
    predictions in total, everything is returned with ``shortfall`` set.
    """
    if n_proposals < 1:
        raise ValueError("n_proposals must be >= 1")
    vis_stream, sem_stream = streams
    per_modality = {}
    for tag, stream in (("visual", vis_stream), ("semantic", sem_stream)):
        centers, lengths, confs = head_forward(module.heads[tag], stream,
                                               module.anchors, clip_duration_s)
        flat = [
            Proposal(video_id, float(centers[t, a]), float(lengths[t, a]),
                     float(confs[t, a]), tag)
            for t in range(centers.shape[0])
            for a in range(centers.shape[1])
        ]
        flat.sort(key=lambda p: (-p.confidence, p.center_s, p.modality))
        per_modality[tag] = flat

    total = sum(len(v) for v in per_modality.values())
    quota_vis = (n_proposals + 1) // 2
    quota_sem = n_proposals // 2
    if total < n_proposals:
        merged = per_modality["visual"] + per_modality["semantic"]
        shortfall = True
    else:
        merged = per_modality["visual"][:quota_vis] + per_modality["semantic"][:quota_sem]
        shortfall = False
    merged.sort(key=lambda p: (-p.confidence, p.center_s, p.modality))
    return ProposalSet(video_id=video_id, proposals=merged, shortfall=shortfall)


def save_proposal_module(pm: ProposalModule, directory) -> None:
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for tag in MODALITIES:
        for name, arr in sorted(pm.heads[tag].state_dict().items()):
            full = f"{tag}.{name}"
            shapes[full] = list(arr.shape)
            flat = arr.reshape(1, -1) if arr.ndim == 1 else arr
            save_feature_matrix(flat, params_dir / (full.replace(".", "__") + ".dvcf"))
    manifest = {
        "anchors": [float(p) for p in pm.anchors.priors],
        "config": {
            "num_anchors": pm.cfg.num_anchors,
            "kernel_sizes": list(pm.cfg.kernel_sizes),
            "hidden_channels": pm.cfg.hidden_channels,
            "neg_weight": pm.cfg.neg_weight,
        },
        "d_model": pm.d_model,
        "param_shapes": shapes,
    }
    with open(directory / "model.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_proposal_module(directory) -> ProposalModule:
    directory = Path(directory)
    with open(directory / "model.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ProposalHeadConfig(
        num_anchors=manifest["config"]["num_anchors"],
        kernel_sizes=tuple(manifest["config"]["kernel_sizes"]),
        hidden_channels=manifest["config"]["hidden_channels"],
        neg_weight=manifest["config"]["neg_weight"],
    )
    anchors = AnchorSet(np.array(manifest["anchors"]))
    rng = np.random.default_rng(0)
    heads = {tag: ProposalHead(manifest["d_model"], cfg, rng) for tag in MODALITIES}
    for tag in MODALITIES:
        state = {}
        for name, _ in heads[tag].named_parameters():
            full = f"{tag}.{name}"
            arr = load_feature_matrix(directory / "params" / (full.replace(".", "__") + ".dvcf"))
            state[name] = arr.reshape(manifest["param_shapes"][full]).astype(np.float64)
        heads[tag].load_state_dict(state)
    return ProposalModule(heads=heads, anchors=anchors, cfg=cfg, d_model=manifest["d_model"])
