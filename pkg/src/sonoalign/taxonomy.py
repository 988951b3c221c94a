"""Anatomy tree, the nine diagnostic task vocabularies, and per-task
label-similarity tables.

The embedded catalog (data/catalog.json) carries 9 body systems, 52 organs
with their parent system, and the closed label sets for tasks T3..T9
together with the zero-shot prompt strings. T1 and T2 vocabularies are the
systems and organs themselves. Every similarity table defaults to the
identity; hierarchical_sim builds the one principled non-identity default
for T2 from the parent-system relation, and load_sim_table installs a
user-provided table from JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

TASK_IDS = ("T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8", "T9")

SYM_TOL = 1e-9


class TaxonomyError(Exception):
    pass


class SimTableError(TaxonomyError):
    pass


class LabelResolutionError(TaxonomyError):
    def __init__(self, task_id, unknown, candidates):
        self.task_id = task_id
        self.unknown = list(unknown)
        self.candidates = list(candidates)
        super().__init__(
            f"unknown label(s) {self.unknown!r} for task {task_id}; "
            f"valid labels: {self.candidates!r}"
        )


def _normalize(label: str) -> str:
    return label.strip().lower()


@dataclass(frozen=True)
class SimTable:
    matrix: np.ndarray

    def validate(self, n_labels, task_id="?"):
        m = self.matrix
        if m.shape != (n_labels, n_labels):
            raise SimTableError(
                f"{task_id}: similarity matrix shape {m.shape}, expected "
                f"({n_labels}, {n_labels})"
            )
        for i in range(n_labels):
            if m[i, i] != 1.0:
                raise SimTableError(f"{task_id}: diagonal entry ({i},{i}) = {m[i, i]}, must be 1")
            for j in range(n_labels):
                if not 0.0 <= m[i, j] <= 1.0:
                    raise SimTableError(f"{task_id}: entry ({i},{j}) = {m[i, j]} outside [0, 1]")
                if abs(m[i, j] - m[j, i]) > SYM_TOL:
                    raise SimTableError(
                        f"{task_id}: asymmetry at ({i},{j}): {m[i, j]} vs {m[j, i]}"
                    )
        return self

    @staticmethod
    def identity(n):
        return SimTable(np.eye(n))


@dataclass(frozen=True)
class UdafTask:
    task_id: str
    name: str
    labels: tuple  # normalized, order fixed
    display_labels: tuple  # original casing, for prompts/output
    similarity: SimTable

    @property
    def n_labels(self):
        return len(self.labels)


@dataclass
class TaxonomyCatalog:
    systems: tuple
    organs: tuple  # display names
    organ_parent: tuple  # parent system index per organ
    tasks: dict = field(default_factory=dict)  # task_id -> UdafTask
    prompts: dict = field(default_factory=dict)  # task_id -> {normalized label -> prompt}

    def task(self, task_id) -> UdafTask:
        if task_id not in self.tasks:
            raise TaxonomyError(f"unknown task id {task_id!r}")
        return self.tasks[task_id]

    def set_similarity(self, task_id, table: SimTable):
        t = self.task(task_id)
        table.validate(t.n_labels, task_id)
        self.tasks[task_id] = UdafTask(t.task_id, t.name, t.labels, t.display_labels, table)

    def resolve_labels(self, task_id, raw):
        """Map raw label strings to vocabulary indices (case-insensitive,
        trimmed). Unknown labels raise instead of being dropped."""
        t = self.task(task_id)
        index = {lab: i for i, lab in enumerate(t.labels)}
        out, unknown = [], []
        for r in raw:
            key = _normalize(str(r))
            if key in index:
                out.append(index[key])
            else:
                unknown.append(r)
        if unknown:
            raise LabelResolutionError(task_id, unknown, t.labels)
        return out

    def validate(self):
        if len(self.systems) != 9:
            raise TaxonomyError(f"expected 9 systems, got {len(self.systems)}")
        if len(self.organs) != 52:
            raise TaxonomyError(f"expected 52 organs, got {len(self.organs)}")
        for i, parent in enumerate(self.organ_parent):
            if not 0 <= parent < len(self.systems):
                raise TaxonomyError(f"organ {i} has invalid parent index {parent}")
        if tuple(self.tasks) != TASK_IDS:
            raise TaxonomyError(f"expected tasks {TASK_IDS}, got {tuple(self.tasks)}")
        for tid, t in self.tasks.items():
            if len(set(t.labels)) != len(t.labels) or not t.labels:
                raise TaxonomyError(f"{tid}: labels must be non-empty and unique")
            t.similarity.validate(t.n_labels, tid)
        return self


def _make_task(task_id, name, display_labels):
    display = tuple(display_labels)
    labels = tuple(_normalize(x) for x in display)
    return UdafTask(task_id, name, labels, display, SimTable.identity(len(labels)))


def default_catalog() -> TaxonomyCatalog:
    """The embedded catalog: T1 = 9 systems, T2 = 52 organs, T3..T9 closed
    attribute vocabularies, identity similarity tables throughout."""
    raw = json.loads(resources.files("sonoalign.data").joinpath("catalog.json").read_text())
    systems = tuple(raw["systems"])
    organs = tuple(o["name"] for o in raw["organs"])
    parents = tuple(o["system"] for o in raw["organs"])
    template = raw["anatomy_prompt_template"]

    tasks = {
        "T1": _make_task("T1", "body system", systems),
        "T2": _make_task("T2", "organ", organs),
    }
    prompts = {
        "T1": {_normalize(s): template.format(s) for s in systems},
        "T2": {_normalize(o): template.format(o) for o in organs},
    }
    for spec in raw["tasks"]:
        tasks[spec["id"]] = _make_task(spec["id"], spec["name"], spec["labels"])
        prompts[spec["id"]] = {_normalize(k): v for k, v in spec["prompts"].items()}

    catalog = TaxonomyCatalog(systems, organs, parents, tasks, prompts)
    return catalog.validate()


def load_sim_table(catalog: TaxonomyCatalog, task_id, path) -> SimTable:
    """Load a similarity override from JSON {"task", "labels", "matrix"}
    and install it on the catalog."""
    with open(path) as f:
        raw = json.load(f)
    if raw.get("task") != task_id:
        raise SimTableError(f"file declares task {raw.get('task')!r}, expected {task_id!r}")
    task = catalog.task(task_id)
    labels = tuple(_normalize(x) for x in raw["labels"])
    if labels != task.labels:
        raise SimTableError(f"{task_id}: label list in file does not match vocabulary")
    table = SimTable(np.asarray(raw["matrix"], dtype=np.float64))
    catalog.set_similarity(task_id, table)
    return table


def hierarchical_sim(catalog: TaxonomyCatalog, sigma_sys=0.5) -> SimTable:
    """Organ-level similarity from the anatomy tree: 1 on the diagonal,
    sigma_sys for distinct organs under the same body system, else 0."""
    n = len(catalog.organs)
    m = np.zeros((n, n))
    for i in range(n):
        m[i, i] = 1.0
        for j in range(i + 1, n):
            if catalog.organ_parent[i] == catalog.organ_parent[j]:
                m[i, j] = m[j, i] = sigma_sys
    return SimTable(m).validate(n, "T2")
