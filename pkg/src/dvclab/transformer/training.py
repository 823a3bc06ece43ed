"""Captioner training: label-smoothed KL loss, teacher forcing, greedy decode.

Training feeds the ground-truth previous token at every step and minimizes
the KL divergence between the model distribution and a label-smoothed
target (mass (1 - gamma) on the true token, gamma spread over every
non-pad, non-true token).  Early stopping monitors greedy-decode BLEU@4 on
a held-out set when one is given, otherwise the training loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Adam, Tensor
from ..dataset import load_feature_matrix, save_feature_matrix
from ..metrics import bleu
from .layers import TransformerConfig
from .models import BiModalTransformer, VanillaTransformer
from .vocab import BOS, EOS, PAD, Vocabulary, tokenize


def label_smoothed_kl(logits, target_ids, gamma: float, pad_id: int = PAD) -> Tensor:
    """KL(target || softmax(logits)) averaged over non-pad positions.

    The target row puts 1-gamma on the true token and gamma/(V-2) on every
    other non-pad token.  Pad positions contribute nothing; an all-pad
    target is an error.  With gamma=0 this is exactly cross-entropy.
    """
    logits = ad.as_tensor(logits)
    ids = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(ids):
        raise ValueError("logits must be (positions, vocab) aligned with targets")
    vocab_size = logits.shape[1]
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if gamma > 0 and vocab_size < 3:
        raise ValueError("smoothing needs a vocabulary beyond pad and the true token")
    keep = np.flatnonzero(ids != pad_id)
    if keep.size == 0:
        raise ValueError("all target positions are padding")

    target = np.full((keep.size, vocab_size), gamma / max(vocab_size - 2, 1))
    target[:, pad_id] = 0.0
    target[np.arange(keep.size), ids[keep]] = 1.0 - gamma

    log_probs = ad.log_softmax(ad.take_rows(logits, keep), axis=-1)
    cross = ad.mul(ad.tsum(ad.mul(log_probs, Tensor(target))), -1.0 / keep.size)
    entropy = float(np.sum(np.where(target > 0, target * np.log(target, where=target > 0), 0.0)))
    return ad.add(cross, entropy / keep.size)


def teacher_forced_accuracy(logits_data: np.ndarray, target_ids, pad_id: int = PAD) -> float:
    """Fraction of non-pad positions whose argmax matches the target."""
    ids = np.asarray(target_ids, dtype=np.int64)
    keep = ids != pad_id
    if not keep.any():
        raise ValueError("all target positions are padding")
    pred = np.argmax(np.asarray(logits_data), axis=-1)
    return float(np.mean(pred[keep] == ids[keep]))


@dataclass
class CaptionExample:
    """One training pair: encoder inputs plus the reference sentence.

    ``inputs`` is an (L, d) matrix for the vanilla model or a (visual,
    semantic) matrix pair for the bi-modal model.
    """

    inputs: object
    sentence: str

    @property
    def tokens(self) -> list:
        return tokenize(self.sentence)


@dataclass
class CaptionTrainHyper:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 8
    patience: int = 10
    seed: int = 0


@dataclass
class CaptionerModel:
    """A trained captioner plus everything needed to run and persist it."""

    kind: str
    cfg: TransformerConfig
    vocab: Vocabulary
    model: object
    input_dims: tuple
    best_score: float = float("nan")
    seed: int = 0

    def encode(self, inputs):
        if self.kind == "bimodal":
            vis, sem = inputs
            return self.model.encode(vis, sem)
        return self.model.encode(inputs)

    def caption(self, inputs, max_len: int | None = None) -> list:
        self.model.eval()
        with ad.no_grad():
            encoded = self.encode(inputs)
            return greedy_decode(self.model, self.kind, encoded, self.vocab,
                                 max_len or self.cfg.max_len)


def _build_model(kind: str, cfg: TransformerConfig, input_dims, vocab_size: int, seed: int):
    if kind == "vanilla":
        (dim,) = input_dims
        return VanillaTransformer(cfg, dim, vocab_size, seed=seed)
    if kind == "bimodal":
        vis_dim, sem_dim = input_dims
        return BiModalTransformer(cfg, vis_dim, sem_dim, vocab_size, seed=seed)
    raise ValueError(f"unknown captioner kind {kind!r}")


def _example_dims(kind: str, example: CaptionExample):
    if kind == "bimodal":
        vis, sem = example.inputs
        return (np.asarray(vis).shape[1], np.asarray(sem).shape[1])
    return (np.asarray(example.inputs).shape[1],)


def greedy_decode(model, kind: str, encoded, vocab: Vocabulary, max_len: int) -> list:
    """Argmax decoding from the start token; stops at end token or max_len."""
    ids = [BOS]
    out = []
    with ad.no_grad():
        while len(out) < max_len:
            logits = model.decode(np.array(ids), encoded)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
            ids.append(nxt)
            if len(ids) >= model.cfg.max_len:
                break
    return vocab.decode(out)


def _mean_loss(model, examples, vocab, gamma):
    model.eval()
    total = 0.0
    with ad.no_grad():
        for ex in examples:
            ids = vocab.encode(ex.tokens)
            logits = model.forward(ex.inputs, np.array([BOS] + ids))
            loss = label_smoothed_kl(logits, np.array(ids + [EOS]), gamma)
            total += float(loss.data)
    return total / len(examples)


def _validation_bleu(model, kind, examples, vocab):
    model.eval()
    candidates, references = [], []
    with ad.no_grad():
        for ex in examples:
            encoded = model.encode(*ex.inputs) if kind == "bimodal" else model.encode(ex.inputs)
            candidates.append(greedy_decode(model, kind, encoded, vocab, model.cfg.max_len))
            references.append(ex.tokens)
    return bleu(candidates, references, max_n=4)[-1]


def train_captioner(kind: str, train_set, cfg: TransformerConfig,
                    hyper: CaptionTrainHyper, val_set=None,
                    vocab: Vocabulary | None = None) -> CaptionerModel:
    """Train a captioner with teacher forcing; returns best-scoring params.

    Deterministic for a fixed hyper.seed: shuffling, dropout and parameter
    init all derive from it.
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("training set is empty")
    if vocab is None:
        vocab = Vocabulary.from_sentences(ex.sentence for ex in train_set)

    input_dims = _example_dims(kind, train_set[0])
    model = _build_model(kind, cfg, input_dims, len(vocab), seed=hyper.seed)
    optimizer = Adam(model.parameters(), lr=hyper.lr, beta1=hyper.beta1,
                     beta2=hyper.beta2, eps=hyper.eps)
    shuffle_rng = np.random.default_rng(hyper.seed)
    model.drop_rng = np.random.default_rng(hyper.seed + 1)

    encoded_targets = []
    for ex in train_set:
        ids = vocab.encode(ex.tokens)
        if len(ids) + 1 > cfg.max_len:
            raise ValueError(f"sentence of {len(ids)} tokens exceeds max_len {cfg.max_len}")
        encoded_targets.append((np.array([BOS] + ids), np.array(ids + [EOS])))

    best_state = model.state_dict()
    if val_set:
        best_score = _validation_bleu(model, kind, val_set, vocab)
        improved = lambda s, b: s > b
    else:
        best_score = _mean_loss(model, train_set, vocab, cfg.smoothing)
        improved = lambda s, b: s < b
    stale = 0

    for _ in range(hyper.epochs):
        model.train()
        order = shuffle_rng.permutation(len(train_set))
        for lo in range(0, len(order), hyper.batch_size):
            batch = order[lo:lo + hyper.batch_size]
            optimizer.zero_grad()
            for idx in batch:
                ex = train_set[idx]
                ins, outs = encoded_targets[idx]
                logits = model.forward(ex.inputs, ins)
                loss = ad.mul(label_smoothed_kl(logits, outs, cfg.smoothing), 1.0 / len(batch))
                loss.backward()
            optimizer.step()

        score = (_validation_bleu(model, kind, val_set, vocab) if val_set
                 else _mean_loss(model, train_set, vocab, cfg.smoothing))
        if improved(score, best_score):
            best_score = score
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return CaptionerModel(kind=kind, cfg=cfg, vocab=vocab, model=model,
                          input_dims=tuple(input_dims), best_score=best_score,
                          seed=hyper.seed)


# --- persistence ------------------------------------------------------------


def save_captioner(cm: CaptionerModel, directory) -> None:
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in sorted(cm.model.state_dict().items()):
        shapes[name] = list(arr.shape)
        flat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        save_feature_matrix(flat, params_dir / (name.replace(".", "__") + ".dvcf"))
    manifest = {
        "kind": cm.kind,
        "config": vars(cm.cfg).copy(),
        "vocab": cm.vocab.id_to_token[4:],
        "input_dims": list(cm.input_dims),
        "best_score": cm.best_score,
        "seed": cm.seed,
        "param_shapes": shapes,
    }
    with open(directory / "model.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_captioner(directory) -> CaptionerModel:
    directory = Path(directory)
    with open(directory / "model.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = TransformerConfig(**manifest["config"])
    vocab = Vocabulary(manifest["vocab"])
    input_dims = tuple(manifest["input_dims"])
    model = _build_model(manifest["kind"], cfg, input_dims, len(vocab), seed=manifest["seed"])
    state = {}
    for name, shape in manifest["param_shapes"].items():
        arr = load_feature_matrix(directory / "params" / (name.replace(".", "__") + ".dvcf"))
        state[name] = arr.reshape(shape).astype(np.float64)
    model.load_state_dict(state)
    model.eval()
    return CaptionerModel(kind=manifest["kind"], cfg=cfg, vocab=vocab, model=model,
                          input_dims=input_dims, best_score=manifest["best_score"],
                          seed=manifest["seed"])
