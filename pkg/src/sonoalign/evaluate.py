"""Zero-shot prompt classification, macro recall, image-text retrieval,
linear probing on frozen embeddings, and embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoders, graph as graph_mod, trainer
from .taxonomy import TASK_IDS, TaxonomyCatalog


class EvalError(Exception):
    pass


def default_prompts(catalog: TaxonomyCatalog, task_id):
    """label index -> prompt text, one per vocabulary entry."""
    task = catalog.task(task_id)
    prompts = catalog.prompts[task_id]
    return {i: prompts[label] for i, label in enumerate(task.labels)}


def _embed_images(state, records):
    rows = [encoders.encode_image(r.features, state.image) for r in records]
    return ad.l2_normalize(ad.concat_rows(rows)).data


def _embed_texts(state, records, catalog):
    raw, fused = [], []
    for r in records:
        t, tf = trainer.embed_text_record(state, r, catalog)
        raw.append(t)
        fused.append(tf)
    return ad.concat_rows(raw).data, ad.l2_normalize(ad.concat_rows(fused)).data


def embed_prompt(state, prompt_text, catalog, labels=None):
    """Prompt pathway: text encoder, then the empty-graph fusion bypass
    (or a singleton label graph when labels are supplied), then L2
    normalization."""
    t = encoders.encode_text(prompt_text, state.text)
    if labels and state.config.graph_enabled:
        g = graph_mod.graph_from_labels(labels, catalog)
        if g.n_nodes:
            z = graph_mod.encode_nodes(g, state.graph, catalog)
            if state.config.fusion_mode == "pooled":
                summary = graph_mod.attention_pool(z, state.graph)
                fused = graph_mod.fuse(t, summary, state.graph, mode="pooled")
            else:
                fused = graph_mod.fuse(t, z, state.graph, mode="nodes")
            return ad.l2_normalize(fused).data
    return ad.l2_normalize(graph_mod.fuse(t, None, state.graph)).data


def macro_recall(predictions, truth_sets, n_classes):
    """Mean per-class recall over classes that appear in the truth; an
    instance of class c counts as recalled when the prediction equals c."""
    if n_classes < 1:
        raise EvalError("n_classes must be >= 1")
    recalls = []
    for c in range(n_classes):
        hits = total = 0
        for pred, truth in zip(predictions, truth_sets):
            if c in truth:
                total += 1
                if pred == c:
                    hits += 1
        if total:
            recalls.append(hits / total)
    return float(np.mean(recalls)) if recalls else 0.0


@dataclass
class TaskMetrics:
    accuracy: float
    macro_recall: float
    n_samples: int


def zero_shot_classify(state, records, catalog, task_id, prompts=None,
                       prompt_graphs=False):
    """Top-1 cosine match against per-label prompt embeddings; a
    prediction inside the (possibly multi-label) truth set counts as
    correct. Ties break toward the lowest label index."""
    task = catalog.task(task_id)
    if prompts is None:
        prompts = default_prompts(catalog, task_id)
    prompt_rows = []
    for i in range(task.n_labels):
        labels = {task_id: (i,)} if prompt_graphs else None
        prompt_rows.append(embed_prompt(state, prompts[i], catalog, labels))
    prompt_mat = np.concatenate(prompt_rows, axis=0)  # L x D

    labeled = [r for r in records if r.label_set(task_id)]
    if not labeled:
        return [], TaskMetrics(0.0, 0.0, 0)
    images = _embed_images(state, labeled)
    scores = images @ prompt_mat.T
    predictions = np.argmax(scores, axis=1)  # argmax keeps the lowest index on ties
    truth_sets = [set(r.label_set(task_id)) for r in labeled]
    correct = sum(1 for p, t in zip(predictions, truth_sets) if int(p) in t)
    metrics = TaskMetrics(
        accuracy=correct / len(labeled),
        macro_recall=macro_recall([int(p) for p in predictions], truth_sets,
                                  task.n_labels),
        n_samples=len(labeled),
    )
    return [int(p) for p in predictions], metrics


def _rank_of_pair(scores, pair_index):
    """1-based rank of the paired item under descending score, ties broken
    by lower index first."""
    s = scores[pair_index]
    higher = int(np.sum(scores > s))
    tied_before = int(np.sum(scores[:pair_index] == s))
    return higher + tied_before + 1


def retrieval_eval(state, records, catalog, ks=(5, 10, 50)):
    """R@K for image-to-text and text-to-image over the record list; K is
    truncated to the corpus size."""
    if not records:
        raise EvalError("no records to evaluate")
    n = len(records)
    images = _embed_images(state, records)
    _, texts = _embed_texts(state, records, catalog)
    cosines = images @ texts.T
    i2t_ranks = np.array([_rank_of_pair(cosines[i], i) for i in range(n)])
    t2i_ranks = np.array([_rank_of_pair(cosines[:, j], j) for j in range(n)])
    table = {"i2t": {}, "t2i": {}, "n": n}
    for k in ks:
        k_eff = min(k, n)
        table["i2t"][k] = float(np.mean(i2t_ranks <= k_eff))
        table["t2i"][k] = float(np.mean(t2i_ranks <= k_eff))
    return table


# ---------------------------------------------------------------------------
# Linear probe

@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.05
    seed: int = 0


def linear_probe(state, train_records, eval_records, catalog, task_id,
                 probe_config=None):
    """Single linear softmax classifier on frozen image embeddings,
    trained with AdamW under cross-entropy; multi-label samples contribute
    their lowest-index label."""
    cfg = probe_config or ProbeConfig()
    task = catalog.task(task_id)
    train = [r for r in train_records if r.label_set(task_id)]
    if not train:
        raise EvalError(f"task {task_id} absent from train records")
    x_train = _embed_images(state, train)
    y_train = np.array([min(r.label_set(task_id)) for r in train])
    n_classes = task.n_labels

    rng = np.random.default_rng([cfg.seed, 4])
    w = ad.Tensor(rng.uniform(-0.01, 0.01, size=(x_train.shape[1], n_classes)),
                  requires_grad=True)
    b = ad.Tensor(np.zeros((1, n_classes)), requires_grad=True)
    moments = {"w": {"m": np.zeros(w.shape), "v": np.zeros(w.shape)},
               "b": {"m": np.zeros(b.shape), "v": np.zeros(b.shape)}}
    x_const = ad.constant(x_train)
    onehot = np.zeros((len(train), n_classes))
    onehot[np.arange(len(train)), y_train] = 1.0
    mask = ad.constant(onehot)

    for step in range(1, cfg.epochs + 1):
        with ad.Tape() as tape:
            logits = ad.add(ad.matmul(x_const, w), b)
            log_probs = ad.row_log_softmax(logits)
            loss = ad.scale(ad.sum_elems(ad.mul(log_probs, mask)), -1.0 / len(train))
            tape.backward(loss)
        for name, p in (("w", w), ("b", b)):
            mom = moments[name]
            g = p.grad
            mom["m"] = 0.9 * mom["m"] + 0.1 * g
            mom["v"] = 0.999 * mom["v"] + 0.001 * g * g
            m_hat = mom["m"] / (1.0 - 0.9 ** step)
            v_hat = mom["v"] / (1.0 - 0.999 ** step)
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            p.zero_grad()

    evals = [r for r in eval_records if r.label_set(task_id)]
    if not evals:
        return [], TaskMetrics(0.0, 0.0, 0)
    x_eval = _embed_images(state, evals)
    predictions = np.argmax(x_eval @ w.data + b.data, axis=1)
    truth_sets = [set(r.label_set(task_id)) for r in evals]
    correct = sum(1 for p, t in zip(predictions, truth_sets) if int(p) in t)
    metrics = TaskMetrics(correct / len(evals),
                          macro_recall([int(p) for p in predictions], truth_sets,
                                       n_classes),
                          len(evals))
    return [int(p) for p in predictions], metrics


# ---------------------------------------------------------------------------
# Reports and export

@dataclass
class MetricReport:
    tasks: dict = field(default_factory=dict)  # task_id -> TaskMetrics
    skipped: list = field(default_factory=list)
    retrieval: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "tasks": {tid: vars(m) for tid, m in self.tasks.items()},
            "skipped": list(self.skipped),
            "retrieval": self.retrieval,
        }

    def to_text(self):
        lines = ["task  accuracy  macro_recall  n"]
        for tid in TASK_IDS:
            if tid in self.tasks:
                m = self.tasks[tid]
                lines.append(f"{tid:<5} {m.accuracy:8.4f}  {m.macro_recall:12.4f}  {m.n_samples}")
            elif tid in self.skipped:
                lines.append(f"{tid:<5}  skipped (no labeled samples)")
        if self.retrieval:
            lines.append("")
            lines.append("direction  " + "  ".join(f"R@{k}" for k in self.retrieval["i2t"]))
            for direction in ("i2t", "t2i"):
                vals = "  ".join(f"{v:.4f}" for v in self.retrieval[direction].values())
                lines.append(f"{direction:<9}  {vals}")
        return "\n".join(lines)


def full_report(state, records, catalog, ks=(5, 10, 50)) -> MetricReport:
    report = MetricReport()
    for tid in TASK_IDS:
        _, metrics = zero_shot_classify(state, records, catalog, tid)
        if metrics.n_samples == 0:
            report.skipped.append(tid)
        else:
            report.tasks[tid] = metrics
    report.retrieval = retrieval_eval(state, records, catalog, ks=ks)
    return report


def export_embeddings(state, records, catalog, path):
    """CSV of per-record image, raw text, and fused text embeddings (17
    significant digits) for external projection tooling."""
    d = state.config.d_model
    images = _embed_images(state, records)
    raw, fused = _embed_texts(state, records, catalog)
    header = (["image_id", "case_id", "t3_labels"]
              + [f"img_{i}" for i in range(d)]
              + [f"text_{i}" for i in range(d)]
              + [f"fused_{i}" for i in range(d)])
    t3_vocab = catalog.task("T3").labels
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for i, r in enumerate(records):
            labels = "|".join(t3_vocab[j] for j in r.label_set("T3"))
            values = np.concatenate([images[i], raw[i], fused[i]])
            f.write(",".join([r.image_id, r.case_id, labels]
                             + [f"{v:.17g}" for v in values]) + "\n")


def save_report(report: MetricReport, json_path=None, text_path=None):
    if json_path:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
    if text_path:
        with open(text_path, "w", encoding="utf-8") as f:
            f.write(report.to_text() + "\n")
