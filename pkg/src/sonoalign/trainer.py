"""Deterministic AdamW training loop over the full pipeline, plus model
state construction, the forward pass shared with evaluation, and
checkpoint persistence."""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoders, graph as graph_mod, objectives
from .dataset import batch_iter
from .prior import prior_matrix
from .taxonomy import TaxonomyCatalog

CHECKPOINT_VERSION = 1

ABLATIONS = ("full", "Ds", "Dg", "Dsg")


class TrainerError(Exception):
    pass


class NonFiniteAbort(TrainerError):
    """Training stopped on a non-finite value; carries the op that produced it."""


class CheckpointError(TrainerError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    lam: float = 0.2
    alpha_s: float = 0.6
    alpha_max: float = 0.2
    tau_init: float = 0.07
    tau2: float = 0.07
    d_model: int = 32
    d_hidden: int = 64
    d_embed: int = 32
    d_attn: int = 32
    heads: int = 4
    gnn_layers: int = 1
    fusion_mode: str = "pooled"
    ablation: str = "full"
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise TrainerError("epochs/batch_size/lr out of range")
        if self.ablation not in ABLATIONS:
            raise TrainerError(f"ablation must be one of {ABLATIONS}")
        if self.fusion_mode not in ("pooled", "nodes"):
            raise TrainerError("fusion_mode must be 'pooled' or 'nodes'")
        if self.d_model % self.heads != 0:
            raise TrainerError("heads must divide d_model")
        return self

    @property
    def graph_enabled(self):
        return self.ablation in ("full", "Ds")

    @property
    def effective_lam(self):
        return self.lam if self.ablation in ("full", "Dg") else 0.0


@dataclass
class ModelState:
    image: encoders.ImageEncoderParams
    text: encoders.TextEncoderParams
    graph: graph_mod.GraphEncoderParams
    rho: ad.Tensor  # log-temperature
    config: TrainConfig
    moments: dict = field(default_factory=dict)  # name -> {"m", "v"}
    step: int = 0

    def named_parameters(self):
        return (self.image.named_parameters() + self.text.named_parameters()
                + self.graph.named_parameters() + [("rho", self.rho)])

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.zero_grad()


def _glorot(rng, rows, cols):
    s = np.sqrt(6.0 / (rows + cols))
    return ad.Tensor(rng.uniform(-s, s, size=(rows, cols)), requires_grad=True)


def _zeros(rows, cols):
    return ad.Tensor(np.zeros((rows, cols)), requires_grad=True)


def init_state(config: TrainConfig, catalog: TaxonomyCatalog, vocab,
               d_in) -> ModelState:
    """Seeded Glorot-uniform weights, zero biases, tau at its configured
    initial value, gate at the midpoint of (0, alpha_max)."""
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    d, h, de, da = config.d_model, config.d_hidden, config.d_embed, config.d_attn
    image = encoders.ImageEncoderParams(
        w1=_glorot(rng, d_in, h), b1=_zeros(1, h),
        w2=_glorot(rng, h, d), b2=_zeros(1, d),
    )
    text = encoders.TextEncoderParams(
        vocab=tuple(vocab),
        emb=_glorot(rng, len(vocab), de),
        proj=_glorot(rng, de, d),
        proj_b=_zeros(1, d),
    )
    _, v_total = graph_mod.vocab_layout(catalog)
    gparams = graph_mod.GraphEncoderParams(
        emb=_glorot(rng, v_total, d),
        w_self_diag=_glorot(rng, d, d),
        w_self_attr=_glorot(rng, d, d),
        w_attr_to_diag=_glorot(rng, d, d),
        w_diag_to_attr=_glorot(rng, d, d),
        w_pool=_glorot(rng, d, da),
        v_pool=_glorot(rng, da, 1),
        w_text=_glorot(rng, d, d),
        w_graph=_glorot(rng, d, d),
        w_out=_glorot(rng, d, d),
        a_gate=_zeros(1, 1),
        ln_gain=ad.Tensor(np.ones((1, d)), requires_grad=True),
        ln_bias=_zeros(1, d),
        heads=config.heads,
        alpha_max=config.alpha_max,
        layers=config.gnn_layers,
    )
    rho = ad.Tensor(np.full((1, 1), np.log(config.tau_init)), requires_grad=True)
    return ModelState(image, text, gparams, rho, config)


def clone_state(state: ModelState) -> ModelState:
    new = copy.copy(state)
    new.image = copy.copy(state.image)
    new.text = copy.copy(state.text)
    new.graph = copy.copy(state.graph)
    for obj in (new.image, new.text, new.graph):
        for attr, value in vars(obj).items():
            if isinstance(value, ad.Tensor):
                setattr(obj, attr, ad.Tensor(value.data.copy(),
                                             requires_grad=value.requires_grad))
    new.rho = ad.Tensor(state.rho.data.copy(), requires_grad=True)
    new.moments = {k: {"m": v["m"].copy(), "v": v["v"].copy()}
                   for k, v in state.moments.items()}
    return new


# ---------------------------------------------------------------------------
# Forward pass

def embed_text_record(state: ModelState, record, catalog: TaxonomyCatalog):
    """Raw and graph-enhanced text embeddings for one record (un-normalized).
    The graph path is skipped under the Dg/Dsg ablations and bypassed for
    records whose graph has no active nodes."""
    t = encoders.encode_text(record.caption, state.text)
    if not state.config.graph_enabled:
        return t, graph_mod.fuse(t, None, state.graph)
    g = graph_mod.build_graph(record, catalog)
    if g.n_nodes == 0:
        return t, graph_mod.fuse(t, None, state.graph)
    z = graph_mod.encode_nodes(g, state.graph, catalog)
    if state.config.fusion_mode == "pooled":
        summary = graph_mod.attention_pool(z, state.graph)
        return t, graph_mod.fuse(t, summary, state.graph, mode="pooled")
    return t, graph_mod.fuse(t, z, state.graph, mode="nodes")


def forward_batch(state: ModelState, batch, catalog: TaxonomyCatalog):
    image_rows = [encoders.encode_image(r.features, state.image) for r in batch]
    text_rows = [embed_text_record(state, r, catalog)[1] for r in batch]
    return objectives.BatchEmbeddings.from_raw(ad.concat_rows(image_rows),
                                               ad.concat_rows(text_rows))


# ---------------------------------------------------------------------------
# Optimization

def _adamw_update(state: ModelState, config: TrainConfig):
    state.step += 1
    t = state.step
    lr, b1, b2 = config.lr, config.beta1, config.beta2
    for name, p in state.named_parameters():
        mom = state.moments.setdefault(
            name, {"m": np.zeros(p.shape), "v": np.zeros(p.shape)})
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        mom["m"] = b1 * mom["m"] + (1.0 - b1) * g
        mom["v"] = b2 * mom["v"] + (1.0 - b2) * g * g
        m_hat = mom["m"] / (1.0 - b1 ** t)
        v_hat = mom["v"] / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    state.zero_grads()


def train_step(state: ModelState, batch, catalog: TaxonomyCatalog) -> objectives.LossBreakdown:
    if not batch:
        raise TrainerError("empty batch")
    config = state.config
    hyper = objectives.LossHyper(config.effective_lam, config.alpha_s, config.tau2)
    try:
        with ad.Tape() as tape:
            emb = forward_batch(state, batch, catalog)
            prior = prior_matrix(batch, catalog) if hyper.lam > 0 else None
            breakdown = objectives.total_loss(emb, prior, state.rho, hyper)
            tape.backward(breakdown.total)
    except ad.NonFiniteError as e:
        raise NonFiniteAbort(f"non-finite value during step {state.step + 1}: {e}") from e
    _adamw_update(state, config)
    return breakdown


# ---------------------------------------------------------------------------
# Full training runs

@dataclass
class TrainingReport:
    epoch_stats: list  # one dict per epoch
    best_epoch: int  # -1 means the initialization
    best_metric: float
    state: ModelState  # final state
    best_state: ModelState


def fit(records, split, config: TrainConfig, catalog: TaxonomyCatalog,
        log_stream=None) -> TrainingReport:
    """Train on the split's train cases, tracking image-to-text R@10 on the
    validation cases; returns the best-validation snapshot alongside the
    final state. Deterministic given (records, split, config)."""
    from . import evaluate  # late import; evaluate builds on this module

    config.validate()
    train_records = split.records_for(records, "train")
    val_records = split.records_for(records, "val")
    if not train_records:
        raise TrainerError("no training records in split")
    d_in = train_records[0].features.size
    prompt_texts = [p for task_prompts in catalog.prompts.values()
                    for p in task_prompts.values()]
    vocab = encoders.build_vocab([r.caption for r in train_records], prompt_texts)
    state = init_state(config, catalog, vocab, d_in)

    def val_metric(s):
        if not val_records:
            return 0.0
        table = evaluate.retrieval_eval(s, val_records, catalog, ks=(10,))
        return table["i2t"][10]

    epoch_stats = []
    best_state = clone_state(state)
    best_metric = val_metric(state)
    best_epoch = -1
    _log(log_stream, {"event": "init", "val_i2t_r10": best_metric})

    for epoch in range(config.epochs):
        losses = []
        for batch in batch_iter(train_records, config.batch_size, config.seed, epoch):
            breakdown = train_step(state, batch, catalog)
            losses.append(breakdown.to_dict())
            _log(log_stream, {"event": "step", "epoch": epoch, **breakdown.to_dict()})
        metric = val_metric(state)
        stats = {
            "epoch": epoch,
            "train_loss": float(np.mean([x["l_total"] for x in losses])),
            "train_l_clip": float(np.mean([x["l_clip"] for x in losses])),
            "train_l_semantic": float(np.mean([x["l_semantic"] for x in losses])),
            "tau": losses[-1]["tau"],
            "val_i2t_r10": metric,
        }
        epoch_stats.append(stats)
        _log(log_stream, {"event": "epoch", **stats})
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = clone_state(state)
    return TrainingReport(epoch_stats, best_epoch, best_metric, state, best_state)


def _log(stream, obj):
    if stream is not None:
        stream.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints

def _encode_array(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(blob, shape):
    return np.frombuffer(base64.b64decode(blob), dtype="<f8").reshape(shape).copy()


def save_checkpoint(state: ModelState, path):
    params = {}
    for name, p in state.named_parameters():
        params[name] = {"shape": list(p.shape), "data": _encode_array(p.data)}
    moments = {}
    for name, mv in state.moments.items():
        moments[name] = {"m": _encode_array(mv["m"]), "v": _encode_array(mv["v"])}
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "vocab": list(state.text.vocab),
        "params": params,
        "moments": moments,
        "step": state.step,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path, catalog: TaxonomyCatalog) -> ModelState:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r}, expected {CHECKPOINT_VERSION}")
    config = TrainConfig(**doc["config"])
    vocab = tuple(doc["vocab"])
    d_in = doc["params"]["image.w1"]["shape"][0]
    state = init_state(config, catalog, vocab, d_in)
    for name, p in state.named_parameters():
        entry = doc["params"].get(name)
        if entry is None:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(
                f"parameter {name!r} shape {entry['shape']} != expected {p.shape}")
        p.data = _decode_array(entry["data"], tuple(entry["shape"]))
    state.moments = {}
    shapes = {name: p.shape for name, p in state.named_parameters()}
    for name, mv in doc["moments"].items():
        state.moments[name] = {"m": _decode_array(mv["m"], shapes[name]),
                               "v": _decode_array(mv["v"], shapes[name])}
    state.step = doc["step"]
    return state
