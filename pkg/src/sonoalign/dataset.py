"""Sample records, JSONL ingestion, case-level 6:2:2 splitting, and the
label-conditioned synthetic corpus generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .taxonomy import TASK_IDS, TaxonomyCatalog, LabelResolutionError

SPLITS = ("train", "val", "test")

CAPTION_TEMPLATE = "a {shape} {echogenicity} {diagnosis} with {margins} margins in the {organ}"


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class SampleRecord:
    case_id: str
    image_id: str
    features: np.ndarray  # 1-D float64, length = corpus D_in
    caption: str
    labels: dict  # task_id -> sorted tuple of label indices

    def label_set(self, task_id):
        return self.labels.get(task_id, ())


def _record_to_json(record: SampleRecord, catalog: TaxonomyCatalog) -> dict:
    labels = {}
    for tid in TASK_IDS:
        idxs = record.label_set(tid)
        if idxs:
            vocab = catalog.task(tid).labels
            labels[tid] = [vocab[i] for i in idxs]
    return {
        "case_id": record.case_id,
        "image_id": record.image_id,
        "features": [float(x) for x in record.features],
        "caption": record.caption,
        "labels": labels,
    }


def save_jsonl(records, catalog, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(_record_to_json(r, catalog), sort_keys=True))
            f.write("\n")


def load_jsonl(path, catalog: TaxonomyCatalog):
    """Parse one record per line, resolving label strings through the
    catalog; every error names the offending line."""
    records = []
    d_in = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: malformed JSON: {e}") from e
            for key in ("case_id", "image_id", "features", "caption", "labels"):
                if key not in obj:
                    raise DatasetError(f"line {lineno}: missing required field {key!r}")
            if not obj["case_id"]:
                raise DatasetError(f"line {lineno}: empty case_id")
            features = np.asarray(obj["features"], dtype=np.float64)
            if features.ndim != 1:
                raise DatasetError(f"line {lineno}: features must be a flat list")
            if d_in is None:
                d_in = features.size
            elif features.size != d_in:
                raise DatasetError(
                    f"line {lineno}: feature length {features.size} inconsistent "
                    f"with earlier records ({d_in})"
                )
            labels = {}
            for tid, raw in obj["labels"].items():
                if tid not in TASK_IDS:
                    raise DatasetError(f"line {lineno}: unknown task id {tid!r}")
                try:
                    idxs = catalog.resolve_labels(tid, raw)
                except LabelResolutionError as e:
                    raise DatasetError(f"line {lineno}: {e}") from e
                if idxs:
                    labels[tid] = tuple(sorted(set(idxs)))
            records.append(SampleRecord(obj["case_id"], obj["image_id"],
                                        features, obj["caption"], labels))
    return records


# ---------------------------------------------------------------------------
# Case-level splitting

@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict  # case_id -> split name

    def cases(self, split):
        return sorted(c for c, s in self.assignment.items() if s == split)

    def records_for(self, records, split):
        return [r for r in records if self.assignment[r.case_id] == split]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.assignment, f, sort_keys=True, indent=0)
            f.write("\n")

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as f:
            assignment = json.load(f)
        bad = {s for s in assignment.values() if s not in SPLITS}
        if bad:
            raise DatasetError(f"split manifest contains unknown splits {bad}")
        return SplitAssignment(assignment)


def split_counts(n, ratios=(0.6, 0.2, 0.2)):
    """Train and test take floor(n * ratio); val absorbs the remainder.

    This reproduces the reference 6:2:2 partition of 11,676 cases into
    7,005 / 2,336 / 2,335 (plain largest-remainder would hand the spare
    case to train instead).
    """
    if len(ratios) != 3:
        raise DatasetError("exactly three split ratios required")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError("ratios must be positive and sum to 1")
    # tiny epsilon guards float noise in n * ratio before flooring
    n_train = int(n * ratios[0] + 1e-9)
    n_test = int(n * ratios[2] + 1e-9)
    n_val = n - n_train - n_test
    return n_train, n_val, n_test


def split_cases(case_ids, ratios=(0.6, 0.2, 0.2), seed=0) -> SplitAssignment:
    cases = sorted(set(case_ids))
    if len(cases) < 3:
        raise DatasetError(f"need at least 3 cases to split, got {len(cases)}")
    counts = split_counts(len(cases), ratios)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cases))
    assignment = {}
    pos = 0
    for split, count in zip(SPLITS, counts):
        for k in order[pos:pos + count]:
            assignment[cases[k]] = split
        pos += count
    return SplitAssignment(assignment)


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass
class SynthConfig:
    n_cases: int = 200
    images_per_case: tuple = (8, 12)  # inclusive range
    d_in: int = 32
    noise_sigma: float = 0.3
    seed: int = 0
    # task_id -> per-label weights (list of length L_k) or per-diagnosis
    # weight rows (list of 5 such lists); None means uniform
    cooccurrence: dict = field(default_factory=dict)
    # probability of omitting each of T4..T9 from a case
    task_dropout: float = 0.0

    def validate(self):
        if self.n_cases < 3:
            raise DatasetError("n_cases must be >= 3 (one case per split)")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        lo, hi = self.images_per_case
        if lo < 1 or hi < lo:
            raise DatasetError(f"bad images_per_case range {self.images_per_case}")
        if not 0.0 <= self.task_dropout <= 1.0:
            raise DatasetError("task_dropout must be in [0, 1]")
        return self


def label_prototypes(catalog: TaxonomyCatalog, cfg: SynthConfig):
    """Fixed unit-norm Gaussian prototype per (task, label), drawn from a
    dedicated stream so they do not depend on the sampling order."""
    rng = np.random.default_rng([cfg.seed, 1])
    protos = {}
    for tid in TASK_IDS:
        n = catalog.task(tid).n_labels
        vecs = rng.normal(size=(n, cfg.d_in))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        protos[tid] = vecs
    return protos


def _task_weights(cfg, task_id, n_labels, diag_idx):
    spec = cfg.cooccurrence.get(task_id)
    if spec is None:
        return np.full(n_labels, 1.0 / n_labels)
    arr = np.asarray(spec, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[diag_idx]
    if arr.size != n_labels or arr.min() < 0 or arr.sum() <= 0:
        raise DatasetError(f"bad cooccurrence weights for {task_id}")
    return arr / arr.sum()


def generate_synthetic(catalog: TaxonomyCatalog, cfg: SynthConfig):
    """Draw labeled cases consistent with the anatomy tree and render
    template captions; features are summed label prototypes plus noise.
    Pure function of (catalog, cfg)."""
    cfg.validate()
    protos = label_prototypes(catalog, cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    organs_by_system = {}
    for organ_idx, parent in enumerate(catalog.organ_parent):
        organs_by_system.setdefault(parent, []).append(organ_idx)

    records = []
    lo, hi = cfg.images_per_case
    n_t3 = catalog.task("T3").n_labels
    for c in range(cfg.n_cases):
        case_id = f"case{c:05d}"
        system = int(rng.integers(0, 9))
        organ = int(rng.choice(organs_by_system[system]))
        diag = int(rng.choice(n_t3, p=_task_weights(cfg, "T3", n_t3, None)))
        labels = {"T1": (system,), "T2": (organ,), "T3": (diag,)}
        for tid in ("T4", "T5", "T6", "T7", "T8", "T9"):
            drop = rng.random() < cfg.task_dropout
            n_k = catalog.task(tid).n_labels
            pick = int(rng.choice(n_k, p=_task_weights(cfg, tid, n_k, diag)))
            if not drop:
                labels[tid] = (pick,)
        caption = CAPTION_TEMPLATE.format(
            shape=_label_text(catalog, "T4", labels),
            echogenicity=_label_text(catalog, "T6", labels),
            diagnosis=_label_text(catalog, "T3", labels),
            margins=_label_text(catalog, "T5", labels),
            organ=_label_text(catalog, "T2", labels),
        )
        base = np.zeros(cfg.d_in)
        for tid, idxs in labels.items():
            for i in idxs:
                base = base + protos[tid][i]
        n_images = int(rng.integers(lo, hi + 1))
        for j in range(n_images):
            noise = rng.normal(size=cfg.d_in) * cfg.noise_sigma
            records.append(SampleRecord(case_id, f"{case_id}_img{j:03d}",
                                        base + noise, caption, dict(labels)))
    return records


def _label_text(catalog, task_id, labels):
    idxs = labels.get(task_id)
    if not idxs:
        return "unspecified"
    return catalog.task(task_id).labels[idxs[0]]


def batch_iter(records, batch_size, seed=0, epoch=0):
    """Deterministic per-epoch shuffle keyed by (seed, epoch); the final
    short batch is kept."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if not records:
        raise DatasetError("no records to iterate")
    rng = np.random.default_rng([seed, 3, epoch])
    order = rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]
