"""Stage orchestration: the two-stage training procedure, end to end.

Each stage reads its declared input artifacts from the run directory,
writes its outputs plus a manifest (config, seeds, content hashes of
inputs and outputs), and is a pure function of (config, seed, inputs):
rerunning a stage with identical inputs reproduces identical bytes.

Stage order: synth -> codebook -> cooccur -> embed ->
train-captioner-bimodal -> train-proposals -> propose ->
train-captioner-vanilla -> caption -> eval.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import codebook as cb
from . import cooccur as co
from . import semvec as sv
from .dataset import (DEFAULT_CLIP_DURATION_S, AnnotationSet, FeatureSequence,
                      SynthConfig, load_annotations, load_features,
                      save_annotations, save_features, synth_corpus)
from .metrics import bleu, proposal_prf, tiou
from .proposals import (AnchorSet, ProposalExample, ProposalHeadConfig,
                        ProposalTrainHyper, fit_anchors, generate_proposals,
                        load_proposal_module, save_proposal_module,
                        train_proposal_module)
from .transformer import (CaptionExample, CaptionTrainHyper, TransformerConfig,
                          load_captioner, save_captioner, tokenize,
                          train_captioner)

STAGES = (
    "synth", "codebook", "cooccur", "embed", "train-captioner-bimodal",
    "train-proposals", "propose", "train-captioner-vanilla", "caption", "eval",
)

# Per-stage seed offsets from the pipeline seed, so stages draw from
# disjoint deterministic streams.
_SEED_OFFSETS = {
    "synth": 0, "codebook": 1, "embed": 2, "train-captioner-bimodal": 3,
    "train-proposals": 4, "train-captioner-vanilla": 5,
}


class PipelineError(RuntimeError):
    """A stage cannot run: missing upstream artifact or bad configuration."""


@dataclass
class SplitConfig:
    val_fraction: float = 0.25

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class CodebookStageConfig:
    k: int = 1500
    epochs: int = 5
    batch_size: int = 1024


@dataclass
class CooccurStageConfig:
    window: int = 5


@dataclass
class EmbeddingStageConfig:
    t_max: float = 100.0
    alpha: float = 0.75
    lr: float = 0.05
    max_iters: int = 1500
    early_stop_patience: int = 100
    d_emb: int = 128


@dataclass
class CaptionerStageConfig:
    d_model: int = 128
    num_heads: int = 4
    num_layers: int = 2
    d_ffn: int = 256
    dropout_rate: float = 0.1
    max_len: int = 64
    smoothing: float = 0.1
    lr: float = 5e-5
    epochs: int = 60
    batch_size: int = 8
    patience: int = 10
    feature_mode: str = "vsm"  # "vsm" or "visual"; used by the vanilla captioner

    def __post_init__(self):
        if self.feature_mode not in ("vsm", "visual"):
            raise ValueError("feature_mode must be 'vsm' or 'visual'")

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(
            d_model=self.d_model, num_heads=self.num_heads,
            num_layers=self.num_layers, d_ffn=self.d_ffn,
            dropout_rate=self.dropout_rate, max_len=self.max_len,
            smoothing=self.smoothing,
        )

    def train_hyper(self, seed: int) -> CaptionTrainHyper:
        return CaptionTrainHyper(lr=self.lr, epochs=self.epochs,
                                 batch_size=self.batch_size,
                                 patience=self.patience, seed=seed)


@dataclass
class ProposalStageConfig:
    num_anchors: int = 10
    kernel_sizes: tuple = (5, 9, 13)
    hidden_channels: int = 32
    neg_weight: float = 0.1
    lr: float = 1e-3
    epochs: int = 100
    top_n: int = 100

    def head_config(self) -> ProposalHeadConfig:
        return ProposalHeadConfig(num_anchors=self.num_anchors,
                                  kernel_sizes=tuple(self.kernel_sizes),
                                  hidden_channels=self.hidden_channels,
                                  neg_weight=self.neg_weight)


@dataclass
class EvalStageConfig:
    tiou_thresholds: tuple = (0.3, 0.5, 0.7, 0.9)
    max_n: int = 4
    caption_top_n: int = 10


@dataclass
class PipelineConfig:
    out_dir: str
    seed: int = 0
    features_dir: str | None = None
    annotations: str | None = None
    clip_duration_s: float = DEFAULT_CLIP_DURATION_S
    synth: SynthConfig | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    codebook: CodebookStageConfig = field(default_factory=CodebookStageConfig)
    cooccur: CooccurStageConfig = field(default_factory=CooccurStageConfig)
    embedding: EmbeddingStageConfig = field(default_factory=EmbeddingStageConfig)
    bimodal_captioner: CaptionerStageConfig = field(default_factory=CaptionerStageConfig)
    vanilla_captioner: CaptionerStageConfig = field(default_factory=CaptionerStageConfig)
    proposals: ProposalStageConfig = field(default_factory=ProposalStageConfig)
    eval: EvalStageConfig = field(default_factory=EvalStageConfig)

    def __post_init__(self):
        if self.synth is None and (self.features_dir is None or self.annotations is None):
            raise ValueError("config needs either a 'synth' block or both "
                             "'features_dir' and 'annotations'")
        if self.synth is not None:
            self.clip_duration_s = self.synth.clip_duration_s

    def stage_seed(self, stage: str) -> int:
        return self.seed + _SEED_OFFSETS.get(stage, 0)


def _build_section(cls, payload, name):
    if not isinstance(payload, dict):
        raise ValueError(f"config section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown keys in config section '{name}': {sorted(unknown)}")
    fixed = {k: (tuple(v) if isinstance(v, list) else v) for k, v in payload.items()}
    return cls(**fixed)


_SECTIONS = {
    "synth": SynthConfig,
    "split": SplitConfig,
    "codebook": CodebookStageConfig,
    "cooccur": CooccurStageConfig,
    "embedding": EmbeddingStageConfig,
    "bimodal_captioner": CaptionerStageConfig,
    "vanilla_captioner": CaptionerStageConfig,
    "proposals": ProposalStageConfig,
    "eval": EvalStageConfig,
}


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError("pipeline config must be a JSON object")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(payload) - top
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return PipelineConfig(**kwargs)


def config_to_dict(cfg) -> dict:
    if dataclasses.is_dataclass(cfg):
        out = {}
        for f in dataclasses.fields(cfg):
            out[f.name] = config_to_dict(getattr(cfg, f.name))
        return out
    if isinstance(cfg, (tuple, list)):
        return [config_to_dict(v) for v in cfg]
    if isinstance(cfg, np.ndarray):
        return cfg.tolist()
    return cfg


# --- artifact bookkeeping ---------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root: Path, rel_to: Path) -> dict:
    out = {}
    if root.is_file():
        return {str(root.relative_to(rel_to)): _sha256(root)}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            out[str(p.relative_to(rel_to))] = _sha256(p)
    return out


_PRODUCERS = {
    "features": "synth",
    "annotations.json": "synth",
    "split.json": "synth",
    "codebook": "codebook",
    "cooccur/cooccurrence.txt": "cooccur",
    "embed": "embed",
    "captioner_bimodal": "train-captioner-bimodal",
    "proposals_model": "train-proposals",
    "proposals/proposals.txt": "propose",
    "captioner_vanilla": "train-captioner-vanilla",
    "captions": "caption",
}


def _require(out_dir: Path, *relpaths: str) -> None:
    for rel in relpaths:
        if not (out_dir / rel).exists():
            producer = _PRODUCERS.get(rel, "unknown")
            raise PipelineError(
                f"missing artifact '{rel}' under {out_dir}; run stage '{producer}' first"
            )


def _write_manifest(out_dir: Path, stage: str, cfg_dict: dict, seed: int,
                    inputs: dict, output_paths) -> None:
    outputs = {}
    for p in output_paths:
        p = Path(p)
        outputs.update(_hash_tree(p, out_dir))
    manifest = {"stage": stage, "seed": seed, "config": cfg_dict,
                "inputs": inputs, "outputs": outputs}
    stage_dir = out_dir / "manifests"
    stage_dir.mkdir(parents=True, exist_ok=True)
    with open(stage_dir / f"{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _input_hashes(out_dir: Path, *relpaths: str) -> dict:
    hashes = {}
    for rel in relpaths:
        hashes.update(_hash_tree(out_dir / rel, out_dir))
    return hashes


def _json_dump(payload, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _json_load(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# --- shared loading helpers ---------------------------------------------------


def _load_split(out_dir: Path) -> tuple:
    split = _json_load(out_dir / "split.json")
    return list(split["train"]), list(split["val"])


def _load_sequences(out_dir: Path, cfg: PipelineConfig, video_ids) -> dict:
    feats = {}
    for vid in video_ids:
        feats[vid] = load_features(out_dir / "features" / f"{vid}.dvcf",
                                   clip_duration_s=cfg.clip_duration_s)
    return feats


def _semantic_streams(out_dir: Path, sequences: dict):
    """Per-video (visual float64, semantic descriptor) stream pair."""
    book = cb.load_codebook(out_dir / "codebook")
    emb = sv.load_embeddings(out_dir / "embed")
    streams = {}
    for vid, fs in sequences.items():
        labels = cb.encode_sequence(book, fs).labels
        vis = fs.features.astype(np.float64)
        sem = sv.descriptor_matrix(emb, labels)
        streams[vid] = (vis, sem)
    return streams


def _event_clip_range(start: float, end: float, clip_dur: float, n_clips: int) -> tuple:
    """Clip index range covering an event, rounded outward to clip bounds."""
    lo = int(np.floor(start / clip_dur + 1e-9))
    hi = int(np.ceil(end / clip_dur - 1e-9))
    lo = max(0, min(lo, n_clips - 1))
    hi = max(lo + 1, min(hi, n_clips))
    return lo, hi


def _event_examples(kind: str, streams: dict, ann: AnnotationSet, video_ids,
                    clip_dur: float, feature_mode: str = "vsm"):
    """CaptionExamples for every GT event of the listed videos."""
    examples = []
    for vid in video_ids:
        if vid not in ann:
            continue
        vis, sem = streams[vid]
        for (start, end), sentence in zip(ann[vid].events, ann[vid].sentences):
            lo, hi = _event_clip_range(start, end, clip_dur, vis.shape[0])
            if kind == "bimodal":
                inputs = (vis[lo:hi], sem[lo:hi])
            elif feature_mode == "vsm":
                inputs = np.hstack([vis[lo:hi], sem[lo:hi]])
            else:
                inputs = vis[lo:hi]
            examples.append(CaptionExample(inputs=inputs, sentence=sentence))
    return examples


# --- stages -------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, out_dir: Path) -> None:
    """Generate (or ingest) features and annotations, then split videos."""
    feat_dir = out_dir / "features"
    if feat_dir.exists():
        shutil.rmtree(feat_dir)
    feat_dir.mkdir(parents=True)

    if cfg.synth is not None:
        synth_cfg = dataclasses.replace(cfg.synth, seed=cfg.stage_seed("synth"))
        sequences, ann = synth_corpus(synth_cfg)
    else:
        src = Path(cfg.features_dir)
        files = sorted(src.glob("*.dvcf"))
        if not files:
            raise PipelineError(f"no .dvcf feature files under {src}")
        sequences = [load_features(p, clip_duration_s=cfg.clip_duration_s) for p in files]
        ann = load_annotations(cfg.annotations)
        missing = [fs.video_id for fs in sequences if fs.video_id not in ann]
        if missing:
            raise PipelineError(f"videos without annotations: {missing[:5]}")

    for fs in sequences:
        save_features(fs, feat_dir / f"{fs.video_id}.dvcf")
    save_annotations(ann, out_dir / "annotations.json")

    ids = sorted(fs.video_id for fs in sequences)
    rng = np.random.default_rng(cfg.stage_seed("synth"))
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_val = max(1, round(cfg.split.val_fraction * len(ids))) if len(ids) > 1 else 0
    split = {"train": sorted(order[n_val:]), "val": sorted(order[:n_val])}
    _json_dump(split, out_dir / "split.json")

    _write_manifest(out_dir, "synth", config_to_dict(cfg.synth) if cfg.synth else
                    {"features_dir": cfg.features_dir, "annotations": cfg.annotations},
                    cfg.stage_seed("synth"), {},
                    [feat_dir, out_dir / "annotations.json", out_dir / "split.json"])


def stage_codebook(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "features", "split.json")
    train_ids, _ = _load_split(out_dir)
    seqs = _load_sequences(out_dir, cfg, train_ids)
    pooled = np.vstack([fs.features for fs in seqs.values()]).astype(np.float64)
    seed = cfg.stage_seed("codebook")
    book = cb.fit_minibatch_kmeans(pooled, k=cfg.codebook.k, epochs=cfg.codebook.epochs,
                                   batch_size=cfg.codebook.batch_size, seed=seed)
    cb.save_codebook(book, out_dir / "codebook",
                     meta={"seed": seed, "epochs": cfg.codebook.epochs,
                           "batch_size": cfg.codebook.batch_size,
                           "inertia": cb.inertia(book, pooled)})
    _write_manifest(out_dir, "codebook", config_to_dict(cfg.codebook), seed,
                    _input_hashes(out_dir, "features", "split.json"),
                    [out_dir / "codebook"])


def stage_cooccur(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "features", "split.json", "codebook")
    train_ids, _ = _load_split(out_dir)
    seqs = _load_sequences(out_dir, cfg, train_ids)
    book = cb.load_codebook(out_dir / "codebook")
    corpus = [cb.encode_sequence(book, seqs[vid]) for vid in train_ids]
    Z = co.count_cooccurrences(corpus, k=book.k, window=cfg.cooccur.window)
    (out_dir / "cooccur").mkdir(parents=True, exist_ok=True)
    co.save_cooccurrence(Z, out_dir / "cooccur" / "cooccurrence.txt")
    _write_manifest(out_dir, "cooccur", config_to_dict(cfg.cooccur), cfg.seed,
                    _input_hashes(out_dir, "features", "split.json", "codebook"),
                    [out_dir / "cooccur"])


def stage_embed(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "cooccur/cooccurrence.txt")
    Z = co.load_cooccurrence(out_dir / "cooccur" / "cooccurrence.txt")
    seed = cfg.stage_seed("embed")
    hyper = sv.GloveHyper(t_max=cfg.embedding.t_max, alpha=cfg.embedding.alpha,
                          lr=cfg.embedding.lr, max_iters=cfg.embedding.max_iters,
                          early_stop_patience=cfg.embedding.early_stop_patience,
                          d_emb=cfg.embedding.d_emb, seed=seed)
    params = sv.train_embeddings(Z, hyper)
    sv.save_embeddings(params, out_dir / "embed",
                       meta={"seed": seed, "final_loss": sv.glove_loss(params, Z, hyper),
                             "window": Z.window})
    _write_manifest(out_dir, "embed", config_to_dict(cfg.embedding), seed,
                    _input_hashes(out_dir, "cooccur/cooccurrence.txt"),
                    [out_dir / "embed"])


def _captioner_stage(cfg: PipelineConfig, out_dir: Path, stage: str) -> None:
    _require(out_dir, "features", "annotations.json", "split.json", "codebook", "embed")
    kind = "bimodal" if stage == "train-captioner-bimodal" else "vanilla"
    ccfg = cfg.bimodal_captioner if kind == "bimodal" else cfg.vanilla_captioner
    train_ids, val_ids = _load_split(out_dir)
    ann = load_annotations(out_dir / "annotations.json")
    seqs = _load_sequences(out_dir, cfg, train_ids + val_ids)
    streams = _semantic_streams(out_dir, seqs)

    train_set = _event_examples(kind, streams, ann, train_ids, cfg.clip_duration_s,
                                ccfg.feature_mode)
    val_set = _event_examples(kind, streams, ann, val_ids, cfg.clip_duration_s,
                              ccfg.feature_mode)
    if not train_set:
        raise PipelineError("no training events found in the train split")
    seed = cfg.stage_seed(stage)
    cm = train_captioner(kind, train_set, ccfg.transformer_config(),
                         ccfg.train_hyper(seed), val_set=val_set or None)
    target = out_dir / ("captioner_bimodal" if kind == "bimodal" else "captioner_vanilla")
    save_captioner(cm, target)
    _write_manifest(out_dir, stage, config_to_dict(ccfg), seed,
                    _input_hashes(out_dir, "features", "annotations.json",
                                  "split.json", "codebook", "embed"),
                    [target])


def stage_train_captioner_bimodal(cfg: PipelineConfig, out_dir: Path) -> None:
    _captioner_stage(cfg, out_dir, "train-captioner-bimodal")


def stage_train_captioner_vanilla(cfg: PipelineConfig, out_dir: Path) -> None:
    _captioner_stage(cfg, out_dir, "train-captioner-vanilla")


def stage_train_proposals(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "features", "annotations.json", "split.json", "codebook",
             "embed", "captioner_bimodal")
    train_ids, _ = _load_split(out_dir)
    ann = load_annotations(out_dir / "annotations.json")
    seqs = _load_sequences(out_dir, cfg, train_ids)
    streams = _semantic_streams(out_dir, seqs)
    seed = cfg.stage_seed("train-proposals")

    train_ann = AnnotationSet({vid: ann[vid] for vid in train_ids if vid in ann})
    anchors = fit_anchors(train_ann, cfg.proposals.num_anchors, seed=seed)

    encoder = load_captioner(out_dir / "captioner_bimodal").model
    dataset = [
        ProposalExample(video_id=vid, vis_stream=streams[vid][0],
                        sem_stream=streams[vid][1],
                        events=list(ann[vid].events),
                        clip_duration_s=cfg.clip_duration_s)
        for vid in train_ids if vid in ann
    ]
    hyper = ProposalTrainHyper(lr=cfg.proposals.lr, epochs=cfg.proposals.epochs, seed=seed)
    module = train_proposal_module(encoder, dataset, anchors,
                                   cfg.proposals.head_config(), hyper)
    save_proposal_module(module, out_dir / "proposals_model")
    _write_manifest(out_dir, "train-proposals", config_to_dict(cfg.proposals), seed,
                    _input_hashes(out_dir, "features", "annotations.json", "split.json",
                                  "codebook", "embed", "captioner_bimodal"),
                    [out_dir / "proposals_model"])


def stage_propose(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "features", "split.json", "codebook", "embed",
             "captioner_bimodal", "proposals_model")
    _, val_ids = _load_split(out_dir)
    if not val_ids:
        raise PipelineError("validation split is empty; nothing to propose on")
    seqs = _load_sequences(out_dir, cfg, val_ids)
    streams = _semantic_streams(out_dir, seqs)
    encoder = load_captioner(out_dir / "captioner_bimodal").model
    module = load_proposal_module(out_dir / "proposals_model")

    (out_dir / "proposals").mkdir(parents=True, exist_ok=True)
    lines = []
    encoder.eval()
    for vid in sorted(val_ids):
        vis, sem = streams[vid]
        with ad.no_grad():
            v_enc, s_enc = encoder.encode(vis, sem)
        result = generate_proposals(module, (v_enc.data, s_enc.data),
                                    cfg.proposals.top_n, cfg.clip_duration_s, vid)
        for p in result.proposals:
            lines.append(f"{vid} {p.start_s!r} {p.end_s!r} {p.confidence!r} {p.modality}")
    with open(out_dir / "proposals" / "proposals.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out_dir, "propose",
                    {"top_n": cfg.proposals.top_n}, cfg.seed,
                    _input_hashes(out_dir, "features", "split.json", "codebook", "embed",
                                  "captioner_bimodal", "proposals_model"),
                    [out_dir / "proposals"])


def _read_proposals(path: Path) -> dict:
    by_video = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        vid, start, end, conf, modality = line.split()
        by_video.setdefault(vid, []).append(
            (float(start), float(end), float(conf), modality))
    return by_video


def stage_caption(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "features", "annotations.json", "split.json", "codebook",
             "embed", "captioner_vanilla", "proposals/proposals.txt")
    _, val_ids = _load_split(out_dir)
    ann = load_annotations(out_dir / "annotations.json")
    seqs = _load_sequences(out_dir, cfg, val_ids)
    streams = _semantic_streams(out_dir, seqs)
    cm = load_captioner(out_dir / "captioner_vanilla")
    mode = cfg.vanilla_captioner.feature_mode

    def inputs_for(vid, start, end):
        vis, sem = streams[vid]
        lo, hi = _event_clip_range(start, end, cfg.clip_duration_s, vis.shape[0])
        return np.hstack([vis[lo:hi], sem[lo:hi]]) if mode == "vsm" else vis[lo:hi]

    captions_gt = {}
    for vid in sorted(val_ids):
        if vid not in ann:
            continue
        captions_gt[vid] = [
            " ".join(cm.caption(inputs_for(vid, start, end)))
            for start, end in ann[vid].events
        ]

    proposals = _read_proposals(out_dir / "proposals" / "proposals.txt")
    captions_learned = {}
    for vid in sorted(val_ids):
        entries = []
        for start, end, conf, modality in proposals.get(vid, [])[:cfg.eval.caption_top_n]:
            entries.append({
                "start": start, "end": end, "confidence": conf, "modality": modality,
                "caption": " ".join(cm.caption(inputs_for(vid, start, end))),
            })
        captions_learned[vid] = entries

    (out_dir / "captions").mkdir(parents=True, exist_ok=True)
    _json_dump(captions_gt, out_dir / "captions" / "captions_gt.json")
    _json_dump(captions_learned, out_dir / "captions" / "captions_learned.json")
    _write_manifest(out_dir, "caption", {"caption_top_n": cfg.eval.caption_top_n,
                                         "feature_mode": mode}, cfg.seed,
                    _input_hashes(out_dir, "features", "annotations.json", "split.json",
                                  "codebook", "embed", "captioner_vanilla",
                                  "proposals/proposals.txt"),
                    [out_dir / "captions"])


def stage_eval(cfg: PipelineConfig, out_dir: Path) -> None:
    _require(out_dir, "annotations.json", "split.json", "proposals/proposals.txt",
             "captions")
    _, val_ids = _load_split(out_dir)
    ann = load_annotations(out_dir / "annotations.json")
    val_ann = AnnotationSet({vid: ann[vid] for vid in val_ids if vid in ann})

    proposals = _read_proposals(out_dir / "proposals" / "proposals.txt")
    by_video = {vid: [(s, e, c) for s, e, c, _m in proposals.get(vid, [])]
                for vid in val_ids}
    prf = proposal_prf(by_video, val_ann, cfg.eval.tiou_thresholds)

    captions_gt = _json_load(out_dir / "captions" / "captions_gt.json")
    cands, refs = [], []
    for vid, caps in sorted(captions_gt.items()):
        for caption, sentence in zip(caps, ann[vid].sentences):
            cands.append(tokenize(caption))
            refs.append(tokenize(sentence))
    bleu_gt = bleu(cands, refs, cfg.eval.max_n) if cands else [0.0] * cfg.eval.max_n

    captions_learned = _json_load(out_dir / "captions" / "captions_learned.json")
    cands_l, refs_l = [], []
    for vid, entries in sorted(captions_learned.items()):
        events = ann[vid].events
        sentences = ann[vid].sentences
        for entry in entries:
            ious = [tiou((entry["start"], entry["end"]), ev) for ev in events]
            best = int(np.argmax(ious)) if ious else -1
            if best < 0 or ious[best] <= 0.0:
                continue  # no overlapping reference to score against
            cands_l.append(tokenize(entry["caption"]))
            refs_l.append(tokenize(sentences[best]))
    bleu_learned = (bleu(cands_l, refs_l, cfg.eval.max_n)
                    if cands_l else [0.0] * cfg.eval.max_n)

    report = {
        "num_videos": len(val_ids),
        "num_gt_events": val_ann.num_events,
        "proposals": {
            "precision": prf.precision, "recall": prf.recall, "f1": prf.f1,
            "per_threshold": {repr(t): list(v) for t, v in prf.per_threshold.items()},
        },
        "bleu_gt": bleu_gt,
        "bleu_learned": bleu_learned,
    }
    (out_dir / "eval").mkdir(parents=True, exist_ok=True)
    _json_dump(report, out_dir / "eval" / "report.json")

    lines = [
        "evaluation report",
        f"videos: {len(val_ids)}  gt events: {val_ann.num_events}",
        f"proposals (tIoU avg over {list(cfg.eval.tiou_thresholds)}):",
        f"  precision {prf.precision:.4f}  recall {prf.recall:.4f}  f1 {prf.f1:.4f}",
        "captioning, ground-truth events:",
        "  " + "  ".join(f"B@{n + 1} {v:.4f}" for n, v in enumerate(bleu_gt)),
        "captioning, learned proposals:",
        "  " + "  ".join(f"B@{n + 1} {v:.4f}" for n, v in enumerate(bleu_learned)),
    ]
    (out_dir / "eval" / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "eval", config_to_dict(cfg.eval), cfg.seed,
                    _input_hashes(out_dir, "annotations.json", "split.json",
                                  "proposals/proposals.txt", "captions"),
                    [out_dir / "eval"])


_STAGE_FUNCS = {
    "synth": stage_synth,
    "codebook": stage_codebook,
    "cooccur": stage_cooccur,
    "embed": stage_embed,
    "train-captioner-bimodal": stage_train_captioner_bimodal,
    "train-proposals": stage_train_proposals,
    "propose": stage_propose,
    "train-captioner-vanilla": stage_train_captioner_vanilla,
    "caption": stage_caption,
    "eval": stage_eval,
}


def run_stage(stage: str, cfg: PipelineConfig) -> Path:
    """Run one pipeline stage; returns the run directory."""
    if stage not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage '{stage}'; expected one of {list(STAGES)}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _STAGE_FUNCS[stage](cfg, out_dir)
    return out_dir


def run_all(cfg: PipelineConfig) -> Path:
    for stage in STAGES:
        run_stage(stage, cfg)
    return Path(cfg.out_dir)


# --- hyperparameter sweep -----------------------------------------------------


def sweep(cfg: PipelineConfig, vocab_sizes, windows) -> list:
    """Retrain codebook/cooccur/embed and the full downstream stack for every
    (vocabulary size, context window) grid point; returns the report rows."""
    vocab_sizes = list(vocab_sizes)
    windows = list(windows)
    if not vocab_sizes or not windows:
        raise PipelineError("sweep grid is empty")

    base = Path(cfg.out_dir)
    _require(base, "features", "annotations.json", "split.json")

    rows = []
    for k in vocab_sizes:
        for window in windows:
            cell = base / "sweep" / f"C{k}_S{window}"
            cell.mkdir(parents=True, exist_ok=True)
            if (cell / "features").exists():
                shutil.rmtree(cell / "features")
            shutil.copytree(base / "features", cell / "features")
            for name in ("annotations.json", "split.json"):
                shutil.copy2(base / name, cell / name)
            cell_cfg = dataclasses.replace(
                cfg,
                out_dir=str(cell),
                codebook=dataclasses.replace(cfg.codebook, k=k),
                cooccur=dataclasses.replace(cfg.cooccur, window=window),
            )
            for stage in STAGES[1:]:
                run_stage(stage, cell_cfg)
            report = _json_load(cell / "eval" / "report.json")
            rows.append({
                "vocab_size": k,
                "window": window,
                "bleu_gt": report["bleu_gt"],
                "bleu_learned": report["bleu_learned"],
                "precision": report["proposals"]["precision"],
                "recall": report["proposals"]["recall"],
                "f1": report["proposals"]["f1"],
            })

    _json_dump(rows, base / "sweep" / "sweep_table.json")
    header = f"{'|C|':>6} {'S':>3} " + " ".join(f"{f'B@{n}':>7}" for n in range(1, 5)) + \
        f" {'P':>7} {'R':>7} {'F1':>7}"
    lines = [header]
    for row in rows:
        bs = row["bleu_gt"] + [0.0] * (4 - len(row["bleu_gt"]))
        lines.append(
            f"{row['vocab_size']:>6} {row['window']:>3} "
            + " ".join(f"{b:7.4f}" for b in bs[:4])
            + f" {row['precision']:7.4f} {row['recall']:7.4f} {row['f1']:7.4f}"
        )
    (base / "sweep" / "sweep_table.txt").write_text("\n".join(lines) + "\n",
                                                    encoding="utf-8")
    return rows
